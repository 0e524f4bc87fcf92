"""Kinetic maintenance of a quadtree approximation to a time-varying kernel density estimate."""
