//! Floating-point precision used for values produced by graph operations.
//!
//! Storage is always `f64`. In [`Precision::Single`] every operation result is
//! rounded to the nearest `f32`, which reproduces single-precision training
//! arithmetic per operation. [`Precision::Double`] is meant for gradient checks.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

thread_local! {
    static CURRENT: Cell<Precision> = const { Cell::new(Precision::Double) };
}

/// Precision in effect on this thread.
pub fn current() -> Precision {
    CURRENT.with(Cell::get)
}

/// Runs `f` with `precision` active on the current thread, restoring the
/// previous setting afterwards (also on unwind).
pub fn with_precision<R>(precision: Precision, f: impl FnOnce() -> R) -> R {
    struct Restore(Precision);
    impl Drop for Restore {
        fn drop(&mut self) {
            CURRENT.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(CURRENT.with(|c| c.replace(precision)));
    f()
}

/// Rounds `values` in place according to the current precision.
pub fn round_in_place(values: &mut [f64]) {
    if current() == Precision::Single {
        for v in values {
            *v = *v as f32 as f64;
        }
    }
}
