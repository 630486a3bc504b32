//! Numeric traits shared by the optimization code.
//!
//! The assignment solver works over anything that behaves like a
//! nonnegative additive cost: machine floats for metric distances and
//! plain integers when exact arithmetic is wanted. Geometry needs a real
//! float and uses [`num_traits::Float`] directly.

use std::fmt::Debug;
use std::ops::{Add, Sub};

use num_traits::{Bounded, Zero};

/// A cost value the assignment solver can add, subtract and compare.
pub trait Cost:
    Copy + PartialOrd + Debug + Zero + Bounded + Add<Output = Self> + Sub<Output = Self>
{
    /// Finite and nonnegative.
    fn is_admissible(self) -> bool;

    /// Whether two totals should be considered the same optimum.
    ///
    /// Exact for integers; a small relative band for floats so that
    /// summation order does not break ties.
    fn same_total(self, other: Self) -> bool;
}

macro_rules! int_cost {
    ($($t:ty),*) => {$(
        impl Cost for $t {
            #[inline]
            fn is_admissible(self) -> bool {
                self >= <$t as num_traits::Zero>::zero()
            }

            #[inline]
            fn same_total(self, other: Self) -> bool {
                self == other
            }
        }
    )*};
}

int_cost!(i32, i64, i128, u32, u64);

impl Cost for f64 {
    #[inline]
    fn is_admissible(self) -> bool {
        self.is_finite() && self >= 0.0
    }

    #[inline]
    fn same_total(self, other: Self) -> bool {
        let scale = self.abs().max(other.abs()).max(1.0);
        (self - other).abs() <= 1e-9 * scale
    }
}

impl Cost for f32 {
    #[inline]
    fn is_admissible(self) -> bool {
        self.is_finite() && self >= 0.0
    }

    #[inline]
    fn same_total(self, other: Self) -> bool {
        let scale = self.abs().max(other.abs()).max(1.0);
        (self - other).abs() <= 1e-5 * scale
    }
}
