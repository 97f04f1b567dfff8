"""One-shot optimum prediction on similarity-metric landscapes for point-set registration."""
