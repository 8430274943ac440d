"""Window-based model averaging for federated learning simulation."""
