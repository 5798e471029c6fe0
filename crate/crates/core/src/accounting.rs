//! Closed-form extra-parameter counts for common PETL families.
//!
//! Counts cover adapter and prompt tensors only; classification heads are excluded.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    AdapterLike,
    VptShallow,
    VptDeep,
    LoRA,
    Ssf,
    Arc,
    Alore,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::AdapterLike,
        Method::VptShallow,
        Method::VptDeep,
        Method::LoRA,
        Method::Ssf,
        Method::Arc,
        Method::Alore,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::AdapterLike => "adapter",
            Method::VptShallow => "vpt-shallow",
            Method::VptDeep => "vpt-deep",
            Method::LoRA => "lora",
            Method::Ssf => "ssf",
            Method::Arc => "arc",
            Method::Alore => "alore",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Symbols of the count formulas. Fields a method does not use are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AccountingInputs {
    pub method: Option<Method>,
    /// Hidden width.
    pub d: u64,
    /// Bottleneck rank.
    pub r: u64,
    /// Layers.
    pub layers: u64,
    /// Experts.
    pub n: u64,
    /// Prompt tokens.
    pub m: u64,
    /// Attention projections updated by LoRA.
    pub w: u64,
    /// Scale-and-shift operations per layer.
    pub o: u64,
}

fn method(inp: &AccountingInputs) -> Result<Method> {
    inp.method
        .ok_or_else(|| Error::Config("accounting inputs carry no method".into()))
}

/// Parameters trained while fine-tuning.
///
/// | method | count |
/// |---|---|
/// | AdapterLike | `4·d·r·L` |
/// | VptShallow | `m·d` |
/// | VptDeep | `m·d·L` |
/// | LoRA | `2·w·d·r·L` |
/// | Ssf | `2·o·d·L` |
/// | Arc | `2·(d·r + (d + r)·L)` |
/// | Alore | `4·d·r·L + n³` |
pub fn fine_tune_params(inp: &AccountingInputs) -> Result<u64> {
    let AccountingInputs {
        d,
        r,
        layers: l,
        n,
        m,
        w,
        o,
        ..
    } = *inp;
    Ok(match method(inp)? {
        Method::AdapterLike => 4 * d * r * l,
        Method::VptShallow => m * d,
        Method::VptDeep => m * d * l,
        Method::LoRA => 2 * w * d * r * l,
        Method::Ssf => 2 * o * d * l,
        Method::Arc => 2 * (d * r + (d + r) * l),
        Method::Alore => 4 * d * r * l + n * n * n,
    })
}

/// Parameters added to the deployed model; zero for methods that merge into the backbone.
pub fn inference_extra_params(inp: &AccountingInputs) -> Result<u64> {
    match method(inp)? {
        Method::AdapterLike | Method::VptShallow | Method::VptDeep => fine_tune_params(inp),
        Method::LoRA | Method::Ssf | Method::Arc | Method::Alore => Ok(0),
    }
}

/// Count in millions, rounded to two decimals.
pub fn millions(count: u64) -> f64 {
    (count as f64 / 1e4).round() / 100.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alore::{count_alore_params, init_alore, AloreBank, AloreConfig, Site};
    use crate::linalg::Rng;
    use proptest::prelude::*;

    fn inp(method: Method) -> AccountingInputs {
        AccountingInputs {
            method: Some(method),
            d: 768,
            r: 4,
            layers: 12,
            n: 4,
            m: 5,
            w: 2,
            o: 3,
        }
    }

    #[test]
    fn reference_counts() {
        assert_eq!(fine_tune_params(&inp(Method::Alore)).unwrap(), 147_520);
        assert_eq!(millions(147_520), 0.15);
        assert_eq!(fine_tune_params(&inp(Method::LoRA)).unwrap(), 147_456);
        assert_eq!(fine_tune_params(&inp(Method::VptShallow)).unwrap(), 3_840);
    }

    #[test]
    fn inference_counts() {
        for m in [Method::LoRA, Method::Ssf, Method::Arc, Method::Alore] {
            assert_eq!(inference_extra_params(&inp(m)).unwrap(), 0);
        }
        let a = inp(Method::AdapterLike);
        assert_eq!(inference_extra_params(&a).unwrap(), fine_tune_params(&a).unwrap());
        let v = AccountingInputs {
            m: 0,
            ..inp(Method::VptDeep)
        };
        assert_eq!(inference_extra_params(&v).unwrap(), 0);
    }

    #[test]
    fn missing_method_is_config_error() {
        let r = fine_tune_params(&AccountingInputs::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("bogus".parse::<Method>().is_err());
    }

    #[test]
    fn formula_matches_enumerated_banks() {
        let mut rng = Rng::new(9);
        for _ in 0..20 {
            let n = [1usize, 2, 4][rng.below(3) as usize];
            let d = n * (1 + rng.below(4) as usize) * 2;
            let r = 1 + rng.below((d / n) as u64) as usize;
            let layers = 1 + rng.below(3) as usize;
            let cfg = AloreConfig {
                d,
                n,
                r,
                sites: vec![Site::PreMhsa, Site::PreFfn],
                layers_adapted: layers,
                dropout_p: 0.0,
            };
            let bank: AloreBank<f64> = init_alore(&cfg, layers, &mut rng).unwrap();
            let formula = fine_tune_params(&AccountingInputs {
                method: Some(Method::Alore),
                d: d as u64,
                r: r as u64,
                layers: layers as u64,
                n: n as u64,
                ..AccountingInputs::default()
            })
            .unwrap();
            assert_eq!(bank.param_count() as u64, formula);
            assert_eq!(count_alore_params(d, r, n, 2, layers), formula);
        }
    }

    fn arb_inputs() -> impl Strategy<Value = AccountingInputs> {
        (0u64..512, 0u64..64, 0u64..24, 0u64..16, 0u64..64, 0u64..4, 0u64..4).prop_map(|(d, r, layers, n, m, w, o)| {
            AccountingInputs {
                method: None,
                d,
                r,
                layers,
                n,
                m,
                w,
                o,
            }
        })
    }

    proptest! {
        #[test]
        fn alore_minus_adapter_is_n_cubed(base in arb_inputs()) {
            let a = fine_tune_params(&AccountingInputs { method: Some(Method::Alore), ..base }).unwrap();
            let b = fine_tune_params(&AccountingInputs { method: Some(Method::AdapterLike), ..base }).unwrap();
            prop_assert_eq!(a - b, base.n.pow(3));
        }

        #[test]
        fn monotone_in_every_input(base in arb_inputs(), field in 0usize..7) {
            let mut bumped = base;
            match field {
                0 => bumped.d += 1,
                1 => bumped.r += 1,
                2 => bumped.layers += 1,
                3 => bumped.n += 1,
                4 => bumped.m += 1,
                5 => bumped.w += 1,
                _ => bumped.o += 1,
            }
            for m in Method::ALL {
                let lo = fine_tune_params(&AccountingInputs { method: Some(m), ..base }).unwrap();
                let hi = fine_tune_params(&AccountingInputs { method: Some(m), ..bumped }).unwrap();
                prop_assert!(hi >= lo);
            }
        }
    }
}
