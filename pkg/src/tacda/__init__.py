"""Cross-domain remaining-useful-life adaptation (TACDA)."""
