use std::cell::{Cell, RefCell};

/// Scalar precision of the tensor engine.
///
/// Storage is always `f64`; in `F32` mode every op output is rounded to the
/// nearest `f32` so that training runs with single-precision values while
/// gradient checks keep full double-precision headroom.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::F64) };
    static OP_COUNTER: Cell<u64> = const { Cell::new(0) };
    static KINKS: RefCell<Option<Vec<bool>>> = const { RefCell::new(None) };
}

pub fn precision() -> Precision {
    PRECISION.with(Cell::get)
}

/// Sets the engine precision for the current thread.
pub fn set_precision(p: Precision) {
    PRECISION.with(|c| c.set(p));
}

/// Restores the previous precision on drop.
pub struct PrecisionGuard {
    previous: Precision,
}

impl PrecisionGuard {
    pub fn new(p: Precision) -> Self {
        let previous = precision();
        set_precision(p);
        PrecisionGuard { previous }
    }
}

impl Drop for PrecisionGuard {
    fn drop(&mut self) {
        set_precision(self.previous);
    }
}

pub(crate) fn round_in_place(data: &mut [f64]) {
    if precision() == Precision::F32 {
        for v in data.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Every op is checked in debug builds; release builds check one op in eight.
pub(crate) fn should_check_finite() -> bool {
    if cfg!(debug_assertions) {
        return true;
    }
    OP_COUNTER.with(|c| {
        let n = c.get().wrapping_add(1);
        c.set(n);
        n % 8 == 0
    })
}

/// Runs `f` while recording which side of zero every relu input falls on.
/// Two evaluations with different patterns straddle a kink.
pub fn trace_kinks<T>(f: impl FnOnce() -> T) -> (T, Vec<bool>) {
    let previous = KINKS.with(|k| k.borrow_mut().replace(Vec::new()));
    let out = f();
    let pattern = KINKS.with(|k| std::mem::replace(&mut *k.borrow_mut(), previous));
    (out, pattern.unwrap_or_default())
}

pub(crate) fn note_kinks(x: &[f64]) {
    KINKS.with(|k| {
        if let Some(trace) = k.borrow_mut().as_mut() {
            trace.extend(x.iter().map(|&v| v > 0.0));
        }
    });
}
