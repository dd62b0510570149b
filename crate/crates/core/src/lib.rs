pub mod dataset;
pub mod eval;
pub mod gan;
pub mod image;
pub mod numeric;
pub mod patch;
pub mod pipeline;
pub mod semantic;
pub mod shape;

/// Worker count for convolution kernels and the evaluation pool. Both split
/// work so that results do not depend on the count. The global pool can be
/// sized only once per process; later calls adjust the kernels alone.
pub fn set_threads(n: usize) {
    numeric::set_threads(n);
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
}
