//! Parameter tree shared by the tensor-valued model, the autodiff graph
//! (`Params<Var>`) and shape bookkeeping (`Params<Shape>`).
//!
//! Canonical tensor order (also the checkpoint order): `embed`, then per
//! layer `norm1.{g,b}`, `attn.{wq,bq[,wk,bk,wv,bv],wo,bo}`, `norm2.{g,b}`,
//! `mlp.{w_in,b_in,w_out,b_out}`, then `final_norm.{g,b}`, `unembed`.

use crate::attention::{AttentionParams, KvParams};

use super::config::ModelConfig;

/// `(rows, cols)`.
pub type Shape = (usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<P> {
    pub gain: P,
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<P> {
    pub w_in: P,
    pub b_in: P,
    pub w_out: P,
    pub b_out: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<P> {
    pub norm1: Norm<P>,
    pub attn: AttentionParams<P>,
    pub norm2: Norm<P>,
    pub mlp: Mlp<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<P> {
    pub embed: P,
    pub layers: Vec<LayerParams<P>>,
    pub final_norm: Norm<P>,
    pub unembed: P,
}

/// Whether the named tensor is a norm parameter or a bias (exempt from
/// weight decay).
pub fn is_norm_or_bias(name: &str) -> bool {
    name.contains("norm")
        || name
            .rsplit('.')
            .next()
            .is_some_and(|leaf| leaf.starts_with('b'))
}

impl Params<Shape> {
    /// Tensor shapes implied by `cfg`.
    pub fn shapes(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let share = &cfg.share;
        let q = share.heads() * share.head_dim();
        let kv = share.kv_groups() * share.head_dim();
        let norm = || Norm {
            gain: (1, d),
            bias: (1, d),
        };
        let layers = (0..share.layers())
            .map(|n| LayerParams {
                norm1: norm(),
                attn: AttentionParams {
                    wq: (d, q),
                    bq: (1, q),
                    kv: share.owns_kv(n).then_some(KvParams {
                        wk: (d, kv),
                        bk: (1, kv),
                        wv: (d, kv),
                        bv: (1, kv),
                    }),
                    wo: (q, d),
                    bo: (1, d),
                },
                norm2: norm(),
                mlp: Mlp {
                    w_in: (d, cfg.d_ff[n]),
                    b_in: (1, cfg.d_ff[n]),
                    w_out: (cfg.d_ff[n], d),
                    b_out: (1, d),
                },
            })
            .collect();
        Params {
            embed: (cfg.vocab, d),
            layers,
            final_norm: norm(),
            unembed: (d, cfg.vocab),
        }
    }
}

fn map_norm<'a, P, Q, E>(
    prefix: &str,
    n: &'a Norm<P>,
    f: &mut impl FnMut(&str, &'a P) -> Result<Q, E>,
) -> Result<Norm<Q>, E> {
    Ok(Norm {
        gain: f(&format!("{prefix}.g"), &n.gain)?,
        bias: f(&format!("{prefix}.b"), &n.bias)?,
    })
}

impl<P> Params<P> {
    /// Structural map that passes each tensor's canonical name. Visits
    /// tensors in canonical order.
    pub fn try_map<'a, Q, E>(
        &'a self,
        mut f: impl FnMut(&str, &'a P) -> Result<Q, E>,
    ) -> Result<Params<Q>, E> {
        let embed = f("embed", &self.embed)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (n, layer) in self.layers.iter().enumerate() {
            let norm1 = map_norm(&format!("layer.{n}.norm1"), &layer.norm1, &mut f)?;
            let a = &layer.attn;
            let pre = format!("layer.{n}.attn");
            let wq = f(&format!("{pre}.wq"), &a.wq)?;
            let bq = f(&format!("{pre}.bq"), &a.bq)?;
            let kv = match &a.kv {
                Some(kv) => Some(KvParams {
                    wk: f(&format!("{pre}.wk"), &kv.wk)?,
                    bk: f(&format!("{pre}.bk"), &kv.bk)?,
                    wv: f(&format!("{pre}.wv"), &kv.wv)?,
                    bv: f(&format!("{pre}.bv"), &kv.bv)?,
                }),
                None => None,
            };
            let wo = f(&format!("{pre}.wo"), &a.wo)?;
            let bo = f(&format!("{pre}.bo"), &a.bo)?;
            let norm2 = map_norm(&format!("layer.{n}.norm2"), &layer.norm2, &mut f)?;
            let m = &layer.mlp;
            let pre = format!("layer.{n}.mlp");
            let mlp = Mlp {
                w_in: f(&format!("{pre}.w_in"), &m.w_in)?,
                b_in: f(&format!("{pre}.b_in"), &m.b_in)?,
                w_out: f(&format!("{pre}.w_out"), &m.w_out)?,
                b_out: f(&format!("{pre}.b_out"), &m.b_out)?,
            };
            layers.push(LayerParams {
                norm1,
                attn: AttentionParams { wq, bq, kv, wo, bo },
                norm2,
                mlp,
            });
        }
        let final_norm = map_norm("final_norm", &self.final_norm, &mut f)?;
        let unembed = f("unembed", &self.unembed)?;
        Ok(Params {
            embed,
            layers,
            final_norm,
            unembed,
        })
    }

    /// Infallible [`Params::try_map`].
    pub fn map<'a, Q>(&'a self, mut f: impl FnMut(&str, &'a P) -> Q) -> Params<Q> {
        match self.try_map(|name, p| Ok::<Q, std::convert::Infallible>(f(name, p))) {
            Ok(out) => out,
            Err(never) => match never {},
        }
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.map(|name, p| out.push((name.to_string(), p)));
        out
    }

    /// Tensors in canonical order, mutably.
    pub fn iter_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        out.push(&mut self.embed);
        for layer in &mut self.layers {
            out.push(&mut layer.norm1.gain);
            out.push(&mut layer.norm1.bias);
            let a = &mut layer.attn;
            out.push(&mut a.wq);
            out.push(&mut a.bq);
            if let Some(kv) = &mut a.kv {
                out.push(&mut kv.wk);
                out.push(&mut kv.bk);
                out.push(&mut kv.wv);
                out.push(&mut kv.bv);
            }
            out.push(&mut a.wo);
            out.push(&mut a.bo);
            out.push(&mut layer.norm2.gain);
            out.push(&mut layer.norm2.bias);
            let m = &mut layer.mlp;
            out.push(&mut m.w_in);
            out.push(&mut m.b_in);
            out.push(&mut m.w_out);
            out.push(&mut m.b_out);
        }
        out.push(&mut self.final_norm.gain);
        out.push(&mut self.final_norm.bias);
        out.push(&mut self.unembed);
        out
    }

    /// Number of tensors.
    pub fn count(&self) -> usize {
        let mut n = 0;
        self.map(|_, _| n += 1);
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::ShareConfig;

    #[test]
    fn named_and_iter_mut_agree_on_order() {
        let share = ShareConfig::new(4, 2, 2, 1, 4).unwrap();
        let cfg = ModelConfig::uniform(11, 8, share, 16).unwrap();
        let shapes = Params::shapes(&cfg);
        let mut indexed = shapes.map(|name, _| name.to_string());
        let named: Vec<String> = shapes.named().into_iter().map(|(n, _)| n).collect();
        let via_mut: Vec<String> = indexed.iter_mut().into_iter().map(|s| s.clone()).collect();
        assert_eq!(named, via_mut);
        assert_eq!(named[0], "embed");
        assert_eq!(named.last().unwrap(), "unembed");
        assert!(named.contains(&"layer.0.attn.wk".to_string()));
        assert!(!named.contains(&"layer.1.attn.wk".to_string()));
        assert!(named.contains(&"layer.2.attn.bv".to_string()));
    }

    #[test]
    fn decay_exemptions() {
        for name in [
            "final_norm.g",
            "layer.0.norm1.b",
            "layer.3.attn.bq",
            "layer.0.mlp.b_in",
            "layer.0.mlp.b_out",
        ] {
            assert!(is_norm_or_bias(name), "{name}");
        }
        for name in ["embed", "unembed", "layer.0.attn.wq", "layer.0.mlp.w_out"] {
            assert!(!is_norm_or_bias(name), "{name}");
        }
    }
}
