"""GAN-based anomaly detection for univariate time series, with baselines and a benchmark harness."""
