"""Reference-free synchronisation, polarization feedback and finite-key analysis for a one-decoy BB84 link."""
