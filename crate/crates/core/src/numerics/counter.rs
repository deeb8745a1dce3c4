//! Instrumented multiply counter for matrix products.
//!
//! Counts are per-thread accumulators; [`count_multiplies`] measures the
//! multiplies executed by a closure on the calling thread.

use nalgebra::{ComplexField, DMatrix};
use std::cell::Cell;

thread_local! {
    static MULTIPLIES: Cell<u64> = const { Cell::new(0) };
}

/// Adds `n` scalar multiplies to the current thread's counter.
#[inline]
pub fn record(n: u64) {
    MULTIPLIES.with(|c| c.set(c.get().wrapping_add(n)));
}

fn current() -> u64 {
    MULTIPLIES.with(Cell::get)
}

/// Runs `f` and returns its result together with the number of scalar
/// multiplies recorded by matrix products inside it.
pub fn count_multiplies<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = current();
    let out = f();
    (out, current().wrapping_sub(before))
}

/// Counted matrix product: records `rows(a)·cols(a)·cols(b)` multiplies.
pub fn matmul<E: ComplexField>(a: &DMatrix<E>, b: &DMatrix<E>) -> DMatrix<E> {
    record((a.nrows() * a.ncols() * b.ncols()) as u64);
    a * b
}
