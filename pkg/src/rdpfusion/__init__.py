"""Privacy-budgeted adaptive sensor fusion under Renyi differential privacy."""
