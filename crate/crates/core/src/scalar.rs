use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point type the numerical core is written against.
///
/// Implemented for `f32` and `f64`. Everything that touches weights,
/// features, probabilities or losses is generic over it; labels, counts and
/// metrics stay in plain integers and `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + Serialize + DeserializeOwned + 'static
{
    /// Probability clamp used by the classifier output.
    fn prob_eps() -> Self {
        Self::from_f64(1e-7).unwrap()
    }

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
