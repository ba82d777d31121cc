"""Graph-transformer exploration planning lab."""
