use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pointwise function applied by `scalar_map`.
///
/// The first six kinds appear in forward plans. `Step`, `Reciprocal` and
/// `Const` only show up as derivatives inside backward passes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fn", content = "c", rename_all = "snake_case")]
pub enum ScalarFn {
    Relu,
    Exp,
    Log,
    Negate,
    AddConst(f64),
    MulConst(f64),
    /// 1 for strictly positive input, else 0 (relu' with relu'(0) = 0).
    Step,
    Reciprocal,
    Const(f64),
}

impl ScalarFn {
    pub fn apply(self, x: f64) -> Result<f64> {
        let y = match self {
            ScalarFn::Relu => x.max(0.0),
            ScalarFn::Exp => x.exp(),
            ScalarFn::Log => {
                if x <= 0.0 {
                    return Err(Error::DomainError(format!("log of non-positive value {x}")));
                }
                x.ln()
            }
            ScalarFn::Negate => -x,
            ScalarFn::AddConst(c) => x + c,
            ScalarFn::MulConst(c) => x * c,
            ScalarFn::Step => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ScalarFn::Reciprocal => {
                if x == 0.0 {
                    return Err(Error::DomainError("reciprocal of zero".into()));
                }
                1.0 / x
            }
            ScalarFn::Const(c) => c,
        };
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("{self:?}({x}) = {y}")));
        }
        Ok(y)
    }

    /// The function whose pointwise product with the upstream gradient is the
    /// input gradient, evaluated on the forward input.
    pub fn derivative(self) -> ScalarFn {
        match self {
            ScalarFn::Relu => ScalarFn::Step,
            ScalarFn::Exp => ScalarFn::Exp,
            ScalarFn::Log => ScalarFn::Reciprocal,
            ScalarFn::Negate => ScalarFn::Const(-1.0),
            ScalarFn::AddConst(_) => ScalarFn::Const(1.0),
            ScalarFn::MulConst(c) => ScalarFn::Const(c),
            ScalarFn::Step | ScalarFn::Const(_) => ScalarFn::Const(0.0),
            // d/dx 1/x = -1/x^2; never needed by forward plans.
            ScalarFn::Reciprocal => ScalarFn::Const(f64::NAN),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_at_zero() {
        assert_eq!(ScalarFn::Relu.apply(0.0).unwrap(), 0.0);
        assert_eq!(ScalarFn::Exp.apply(0.0).unwrap(), 1.0);
        assert!(matches!(ScalarFn::Log.apply(0.0), Err(Error::DomainError(_))));
        assert_eq!(ScalarFn::Negate.apply(0.0).unwrap(), 0.0);
        assert_eq!(ScalarFn::AddConst(2.5).apply(0.0).unwrap(), 2.5);
        assert_eq!(ScalarFn::MulConst(2.5).apply(0.0).unwrap(), 0.0);
        assert_eq!(ScalarFn::Step.apply(0.0).unwrap(), 0.0);
    }

    #[test]
    fn overflow_is_reported() {
        assert!(matches!(ScalarFn::Exp.apply(1e4), Err(Error::NonFinite(_))));
    }
}
