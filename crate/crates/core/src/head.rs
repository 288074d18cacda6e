//! Object importance head and the training loss.

use candle_core::{Module, Tensor, D};
use candle_nn::{Linear, VarBuilder};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{constant, softmax_last, LinearNormRelu};

/// Probability clip applied inside both loss terms.
pub const PROB_EPS: f64 = 1e-7;
/// Focusing exponent of the focal term.
pub const FOCAL_GAMMA: f64 = 2.0;
/// Weight of the positive class in the focal term.
pub const FOCAL_BALANCE: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct ImportanceScores {
    /// `(N, 2)` pre-softmax outputs.
    pub logits: Tensor,
    /// `(N, 2)` class probabilities.
    pub probs: Tensor,
    /// `(N,)` probability of the important class.
    pub a: Tensor,
}

impl ImportanceScores {
    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.a.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?)
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    proj: LinearNormRelu,
    hidden: Linear,
    out: Linear,
}

impl Head {
    pub fn new(cfg: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        let flat = cfg.spatial_dim() * cfg.roi_size * cfg.roi_size;
        Ok(Self {
            proj: LinearNormRelu::new(flat, cfg.hidden, vb.pp("proj"))?,
            hidden: candle_nn::linear(cfg.hidden, cfg.head_hidden(), vb.pp("mlp.0"))?,
            out: candle_nn::linear(cfg.head_hidden(), 2, vb.pp("mlp.1"))?,
        })
    }

    /// `A = Softmax(MLP(Linear(f_ois) + f_ol))`. Either input may be absent
    /// when its branch is ablated, but not both.
    pub fn estimate_importance(&self, f_ois: Option<&Tensor>, f_ol: Option<&Tensor>) -> Result<ImportanceScores> {
        let spatial = match f_ois {
            Some(f) => {
                let n = f.dim(0)?;
                Some(self.proj.forward(&f.reshape((n, ()))?)?)
            }
            None => None,
        };
        let fused = match (spatial, f_ol) {
            (Some(s), Some(l)) => {
                if s.dims() != l.dims() {
                    return Err(Error::Shape(format!(
                        "projected spatial feature {:?} does not match lane feature {:?}",
                        s.dims(),
                        l.dims()
                    )));
                }
                (s + l)?
            }
            (Some(s), None) => s,
            (None, Some(l)) => l.clone(),
            (None, None) => {
                return Err(Error::Config("importance head needs at least one input".into()));
            }
        };
        let logits = self.out.forward(&self.hidden.forward(&fused)?.relu()?)?;
        let probs = softmax_last(&logits)?;
        let a = probs.narrow(D::Minus1, 1, 1)?.squeeze(D::Minus1)?;
        Ok(ImportanceScores { logits, probs, a })
    }
}

/// Per-object binary cross-entropy and focal terms, each `(N,)`.
pub fn loss_terms(a: &Tensor, labels: &[bool]) -> Result<(Tensor, Tensor)> {
    let n = a.dim(0)?;
    if n == 0 {
        return Err(Error::Input("loss of an empty object set".into()));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} scores for {} labels", labels.len())));
    }
    let y = constant(
        labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect(),
        &[n],
        a.dtype(),
        a.device(),
    )?;
    let one_minus_y = (y.ones_like()? - &y)?;
    let p = a.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let q = (p.ones_like()? - &p)?;
    let (log_p, log_q) = (p.log()?, q.log()?);
    let bce = ((&y * &log_p)? + (&one_minus_y * &log_q)?)?.neg()?;
    let focal_pos = ((&y * q.powf(FOCAL_GAMMA)?)? * &log_p)?;
    let focal_neg = ((&one_minus_y * p.powf(FOCAL_GAMMA)?)? * &log_q)?;
    let focal = ((focal_pos * FOCAL_BALANCE)? + (focal_neg * (1.0 - FOCAL_BALANCE))?)?.neg()?;
    Ok((bce, focal))
}

/// Mean over objects of BCE plus focal loss.
pub fn importance_loss(a: &Tensor, labels: &[bool]) -> Result<Tensor> {
    let (bce, focal) = loss_terms(a, labels)?;
    Ok((bce + focal)?.mean_all()?)
}
