//! Records which side of every non-differentiable point (ReLU, clamp) a
//! forward pass landed on, so finite differences that straddle one can be
//! recognized.

use std::cell::Cell;

thread_local! {
    static PATTERN: Cell<Option<u64>> = const { Cell::new(None) };
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

/// Folds branch outcomes into the active recording, if any.
pub fn observe(flags: impl IntoIterator<Item = bool>) {
    PATTERN.with(|p| {
        if let Some(mut h) = p.get() {
            for f in flags {
                h = (h ^ u64::from(f)).wrapping_mul(FNV_PRIME);
            }
            p.set(Some(h));
        }
    });
}

pub fn is_recording() -> bool {
    PATTERN.with(|p| p.get().is_some())
}

/// Runs `f` and returns its result with a hash of every branch observed inside.
pub fn record<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let outer = PATTERN.with(|p| p.replace(Some(FNV_OFFSET)));
    let out = f();
    let h = PATTERN
        .with(|p| p.replace(outer))
        .expect("recording active");
    (out, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patterns_distinguish_branches() {
        let ((), a) = record(|| observe([true, false]));
        let ((), b) = record(|| observe([true, true]));
        let ((), c) = record(|| observe([true, false]));
        assert_ne!(a, b);
        assert_eq!(a, c);
        assert!(!is_recording());
    }
}
