use super::field::{BalanceMode, CharacteristicField, Direction, DirectionInputs};
use super::model::CnodeModel;
use crate::diffcore::{MlpSpec, ParamVector};
use crate::error::{check_len, Result};

fn linear_params(w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut p = w.to_vec();
    p.extend_from_slice(b);
    p
}

/// Frozen field with `n = 1`, `k = 2`: `a = (1, u0)` and `J = [1, −2]`.
///
/// Along each characteristic `du/ds = 1 − 2·u0`, so `u(1) = 1 − u0` and the
/// trajectories from `u0 = 0` and `u0 = 1` cross.
pub fn intersecting() -> (CnodeModel, ParamVector) {
    let field = CharacteristicField {
        k: 2,
        n: 1,
        direction: Direction::Learned {
            net: MlpSpec::linear(1, 2),
            inputs: DirectionInputs {
                x: false,
                u: false,
                cond: true,
            },
        },
        jac_net: MlpSpec::linear(1, 2),
        balance_mode: BalanceMode::UOnly,
    };
    let model = CnodeModel::new(None, field, None).expect("construction is consistent");
    let mut theta2 = linear_params(&[0.0, 1.0], &[1.0, 0.0]);
    theta2.extend(linear_params(&[0.0, 0.0], &[1.0, -2.0]));
    let params = model
        .assemble(vec![], theta2, vec![])
        .expect("segment sizes match");
    (model, params)
}

/// Frozen field whose time-one map is `u0 ↦ A·u0` for a row-major `n × n` matrix `A`.
///
/// Uses `k = 2n`, direction `a = [A·u0; u0]` and constant `J = [I | −I]`, so
/// `du/ds = A·u0 − u0` along the characteristic.
pub fn homeomorphism(a: &[f64], n: usize) -> Result<(CnodeModel, ParamVector)> {
    check_len("linear map", n * n, a.len())?;
    let k = 2 * n;
    let field = CharacteristicField {
        k,
        n,
        direction: Direction::Learned {
            net: MlpSpec::linear(n, k),
            inputs: DirectionInputs {
                x: false,
                u: false,
                cond: true,
            },
        },
        jac_net: MlpSpec::linear(n, n * k),
        balance_mode: BalanceMode::UOnly,
    };
    let model = CnodeModel::new(None, field, None)?;
    let mut w_dir = a.to_vec();
    for i in 0..n {
        for j in 0..n {
            w_dir.push(if i == j { 1.0 } else { 0.0 });
        }
    }
    let mut theta2 = linear_params(&w_dir, &vec![0.0; k]);
    let mut j_bias = vec![0.0; n * k];
    for i in 0..n {
        j_bias[i * k + i] = 1.0;
        j_bias[i * k + n + i] = -1.0;
    }
    theta2.extend(linear_params(&vec![0.0; n * k * n], &j_bias));
    let params = model.assemble(vec![], theta2, vec![])?;
    Ok((model, params))
}
