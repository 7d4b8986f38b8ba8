"""mr1s - decoupled MapReduce over one-sided windows."""
