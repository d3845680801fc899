//! Criterion benchmarks for the fingerprinting core (see benches/).
