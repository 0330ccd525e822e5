use super::instance::{MlpLayer, MsaLayer, TrialInstance};
use super::{BoundCheck, BoundKind};
use crate::error::{Error, Result};
use super::spectral::Spectral;
use crate::linalg::{diversity, frobenius, Activation, ActivationSpec};
use crate::model::{
    aug_msa_forward, dense_shortcut, mlp_forward, msa_forward, siaf_mlp_forward, ShortcutWeights,
};
use ndarray::{concatenate, Array2, Axis};
use std::collections::BTreeMap;

/// Relative slack allowed on inequalities.
pub const INEQUALITY_TOL: f64 = 1e-9;
/// Relative tolerance on identities.
pub const EQUALITY_TOL: f64 = 1e-10;

fn holds(lhs: f64, rhs: f64) -> bool {
    rhs - lhs >= -INEQUALITY_TOL * rhs.abs().max(1.0)
}

fn equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= EQUALITY_TOL * a.abs().max(b.abs())
}

struct Evaluation {
    lhs: f64,
    rhs: f64,
    strict: bool,
    /// Secondary statements evaluated with the primary one; all must hold.
    side_conditions: bool,
}

impl Evaluation {
    fn plain(lhs: f64, rhs: f64) -> Self {
        Self {
            lhs,
            rhs,
            strict: false,
            side_conditions: true,
        }
    }
}

struct Ctx<'a> {
    spectral: Spectral,
    aux: &'a mut BTreeMap<String, f64>,
}

impl Ctx<'_> {
    fn note(&mut self, key: impl Into<String>, value: f64) {
        self.aux.insert(key.into(), value);
    }

    fn norm(&self, w: &Array2<f64>) -> Result<f64> {
        self.spectral.norm(w)
    }

    fn shortcut_norm(&self, sc: &ShortcutWeights<Array2<f64>>) -> Result<f64> {
        match sc {
            ShortcutWeights::Dense { theta } => self.norm(theta),
            ShortcutWeights::Bottleneck { w_down, w_up } => Ok(self.norm(w_down)? * self.norm(w_up)?),
        }
    }

    /// Measured `(λ, s, υ₁)` for one MSA layer given its attention matrices.
    fn msa_constants(&self, layer: &MsaLayer, attention: &[Array2<f64>]) -> Result<(f64, f64, f64)> {
        let mut lambda = 0.0f64;
        for a in attention {
            lambda = lambda.max(self.spectral.attention_lambda(a)?);
        }
        let mut s = 0.0f64;
        for w in &layer.attn.wv {
            s = s.max(self.norm(w)?);
        }
        Ok((lambda, s, self.norm(&layer.attn.wo)?))
    }

    /// Runs one (possibly augmented) MSA layer and returns its output and
    /// diversity growth factor.
    fn msa_step(&mut self, z: &Array2<f64>, layer: &MsaLayer, tag: &str) -> Result<(Array2<f64>, f64)> {
        let heads = layer.attn.n_heads() as f64;
        let out = if layer.shortcuts.is_empty() {
            msa_forward(z, &layer.attn, false)?
        } else {
            aug_msa_forward(z, &layer.attn, &layer.shortcuts, layer.shortcut_activation, false)?
        };
        let (lambda, s, upsilon1) = self.msa_constants(layer, &out.attention)?;
        let mut factor = (lambda * heads).sqrt() * s * upsilon1;
        self.note(format!("{tag}lambda"), lambda);
        self.note(format!("{tag}s"), s);
        self.note(format!("{tag}upsilon1"), upsilon1);
        if !layer.shortcuts.is_empty() {
            let lip = ActivationSpec::new(layer.shortcut_activation).lipschitz;
            let mut theta_sum = 0.0;
            for sc in &layer.shortcuts {
                theta_sum += self.shortcut_norm(sc)?;
            }
            self.note(format!("{tag}shortcut_norm_sum"), theta_sum);
            factor += 1.0 + lip * theta_sum;
        }
        Ok((out.output, factor))
    }

    fn mlp_step(&mut self, z: &Array2<f64>, layer: &MlpLayer, tag: &str) -> Result<(Array2<f64>, f64)> {
        match layer {
            MlpLayer::Plain { w1, w2, activation } => {
                let out = mlp_forward(z, w1, w2, *activation)?;
                let lip = ActivationSpec::new(*activation).lipschitz;
                let (s, upsilon2) = (self.norm(w1)?, self.norm(w2)?);
                self.note(format!("{tag}s"), s);
                self.note(format!("{tag}upsilon2"), upsilon2);
                Ok((out, lip * s * upsilon2))
            }
            MlpLayer::Siaf {
                branches,
                activations,
                w2,
            } => {
                let out = siaf_mlp_forward(z, branches, activations, w2)?;
                let upsilon2 = self.norm(w2)?;
                let (mut weighted, mut lip_sum, mut s_max) = (0.0, 0.0, 0.0f64);
                for (br, act) in branches.iter().zip(activations) {
                    let lip = ActivationSpec::new(*act).lipschitz;
                    let s = self.norm(&br.w1)?;
                    weighted += lip * br.scale[[0, 0]].abs() * s;
                    lip_sum += lip;
                    s_max = s_max.max(s);
                }
                self.note(format!("{tag}upsilon2"), upsilon2);
                // Form with unit branch scales, reported for comparison only.
                self.note(format!("{tag}unit_scale_factor"), lip_sum * s_max * upsilon2);
                Ok((out, weighted * upsilon2))
            }
        }
    }
}

/// Evaluates the bound named by `kind` on `inst`.
///
/// The left side comes from the module forward functions; the right side
/// from the closed form with spectral constants measured on this instance.
/// Power-iteration failure yields an inconclusive, non-passing record.
pub fn check_inequality(kind: BoundKind, inst: &TrialInstance) -> Result<BoundCheck> {
    if inst.kind != kind {
        return Err(Error::invalid(format!("instance was sampled for {}, not {kind}", inst.kind)));
    }
    inst.dims.validate(kind)?;
    let mut aux = BTreeMap::new();
    let (evaluated, fallbacks) = {
        let mut ctx = Ctx {
            spectral: Spectral::new(),
            aux: &mut aux,
        };
        let ev = evaluate(kind, inst, &mut ctx);
        (ev, ctx.spectral.fallbacks())
    };
    if fallbacks > 0 {
        aux.insert("dense_fallbacks".into(), fallbacks as f64);
    }
    let ev = match evaluated {
        Ok(ev) => ev,
        Err(Error::NoConvergence { iterations, residual }) => {
            aux.insert("power_iterations".into(), iterations as f64);
            aux.insert("power_residual".into(), residual);
            return Ok(BoundCheck {
                kind,
                lhs: 0.0,
                rhs: 0.0,
                slack: 0.0,
                pass: false,
                strict: kind.is_strict(),
                inconclusive: true,
                seed: inst.seed,
                dims: inst.dims,
                aux,
            });
        }
        Err(e) => return Err(e),
    };
    let slack = ev.rhs - ev.lhs;
    let primary = if kind.is_equality() {
        equal(ev.lhs, ev.rhs)
    } else if ev.strict {
        slack > 0.0
    } else {
        holds(ev.lhs, ev.rhs)
    };
    Ok(BoundCheck {
        kind,
        lhs: ev.lhs,
        rhs: ev.rhs,
        slack,
        pass: primary && ev.side_conditions,
        strict: ev.strict,
        inconclusive: false,
        seed: inst.seed,
        dims: inst.dims,
        aux,
    })
}

fn required<'a>(m: &'a Option<Array2<f64>>, what: &str, kind: BoundKind) -> Result<&'a Array2<f64>> {
    m.as_ref()
        .ok_or_else(|| Error::invalid(format!("{kind} instance is missing {what}")))
}

fn evaluate(kind: BoundKind, inst: &TrialInstance, ctx: &mut Ctx<'_>) -> Result<Evaluation> {
    let z = &inst.z;
    let dz = diversity(z.view())?;
    ctx.note("d_z", dz);
    match kind {
        BoundKind::Lemma1Weight => {
            let w = required(&inst.weight, "W", kind)?;
            let s = ctx.norm(w)?;
            ctx.note("s", s);
            Ok(Evaluation::plain(diversity(z.dot(w).view())?, s * dz))
        }
        BoundKind::Lemma1Activation => {
            let lip = ActivationSpec::new(inst.activation).lipschitz;
            ctx.note("lipschitz", lip);
            let out = z.mapv(|x| inst.activation.apply(x));
            Ok(Evaluation::plain(diversity(out.view())?, lip * dz))
        }
        BoundKind::Lemma1Convex => {
            let b = required(&inst.other, "B", kind)?;
            let [a1, a2] = inst.alphas;
            if a1 < 0.0 || a2 < 0.0 {
                return Err(Error::invalid("convex-combination weights must be non-negative"));
            }
            let mix = z * a1 + b * a2;
            Ok(Evaluation::plain(diversity(mix.view())?, a1 * dz + a2 * diversity(b.view())?))
        }
        BoundKind::Lemma1Attention => {
            let a = required(&inst.attention, "A", kind)?;
            let lambda = ctx.spectral.attention_lambda(a)?;
            ctx.note("lambda", lambda);
            Ok(Evaluation::plain(diversity(a.dot(z).view())?, lambda.sqrt() * dz))
        }
        BoundKind::Lemma2ConcatEq => {
            if inst.blocks.is_empty() {
                return Err(Error::invalid("LEMMA2_CONCAT_EQ instance has no blocks"));
            }
            let views: Vec<_> = inst.blocks.iter().map(|b| b.view()).collect();
            let joined = concatenate(Axis(1), &views).map_err(|e| Error::shape("concat", e.to_string()))?;
            let lhs = diversity(joined.view())?.powi(2);
            let mut rhs = 0.0;
            for b in &inst.blocks {
                rhs += diversity(b.view())?.powi(2);
            }
            Ok(Evaluation::plain(lhs, rhs))
        }
        BoundKind::Thm1Singlehead => {
            let layer = inst.msa.first().ok_or_else(|| Error::invalid("THM1 instance has no layer"))?;
            if layer.attn.n_heads() != 1 {
                return Err(Error::invalid("THM1_SINGLEHEAD needs exactly one head"));
            }
            let mut bare = layer.attn.clone();
            bare.wo = Array2::eye(z.ncols());
            let out = msa_forward(z, &bare, false)?;
            let (lambda, s, upsilon1) = ctx.msa_constants(layer, &out.attention)?;
            ctx.note("lambda", lambda);
            ctx.note("s", s);
            ctx.note("upsilon1", upsilon1);
            let lhs = diversity(out.output.view())?;
            let rhs = lambda.sqrt() * s * dz;
            // Same layer with its output projection applied.
            let with_wo = msa_forward(z, &layer.attn, false)?;
            let lhs_o = diversity(with_wo.output.view())?;
            let rhs_o = rhs * upsilon1;
            ctx.note("with_output_projection_lhs", lhs_o);
            ctx.note("with_output_projection_rhs", rhs_o);
            Ok(Evaluation {
                side_conditions: holds(lhs_o, rhs_o),
                ..Evaluation::plain(lhs, rhs)
            })
        }
        BoundKind::Thm2Msa | BoundKind::Thm4Augmsa => {
            let layer = inst.msa.first().ok_or_else(|| Error::invalid(format!("{kind} instance has no layer")))?;
            let (out, factor) = ctx.msa_step(z, layer, "")?;
            if kind == BoundKind::Thm2Msa {
                let heads = layer.attn.n_heads() as f64;
                let (l, s, u) = (ctx.aux["lambda"], ctx.aux["s"], ctx.aux["upsilon1"]);
                ctx.note("head_linear_rhs", l.sqrt() * heads * s * u * dz);
            }
            ctx.note("factor", factor);
            Ok(Evaluation::plain(diversity(out.view())?, factor * dz))
        }
        BoundKind::Thm3Mlp | BoundKind::Thm7Siaf => {
            let layer = inst.mlp.first().ok_or_else(|| Error::invalid(format!("{kind} instance has no layer")))?;
            let (out, factor) = ctx.mlp_step(z, layer, "")?;
            ctx.note("factor", factor);
            Ok(Evaluation::plain(diversity(out.view())?, factor * dz))
        }
        BoundKind::Thm2MsaStack
        | BoundKind::Thm4AugmsaStack
        | BoundKind::Thm3MlpStack
        | BoundKind::Thm7SiafStack
        | BoundKind::Thm8CombinedVanilla
        | BoundKind::Thm9CombinedPangu => {
            let mut cur = z.clone();
            let mut product = 1.0;
            let (mut msa_max, mut mlp_max) = (0.0f64, 0.0f64);
            let mut step_ok = true;
            for (l, layer) in inst.msa.iter().enumerate() {
                let (next, factor) = ctx.msa_step(&cur, layer, &format!("layer{l}_"))?;
                product *= factor;
                msa_max = msa_max.max(factor);
                step_ok &= holds(diversity(next.view())?, factor * diversity(cur.view())?);
                cur = next;
            }
            let offset = inst.msa.len();
            for (l, layer) in inst.mlp.iter().enumerate() {
                let (next, factor) = ctx.mlp_step(&cur, layer, &format!("layer{}_", offset + l))?;
                product *= factor;
                mlp_max = mlp_max.max(factor);
                step_ok &= holds(diversity(next.view())?, factor * diversity(cur.view())?);
                cur = next;
            }
            let max_form = msa_max.powi(inst.msa.len() as i32) * mlp_max.powi(inst.mlp.len() as i32) * dz;
            ctx.note("max_factor_power_rhs", max_form);
            ctx.note("factor_product", product);
            Ok(Evaluation {
                side_conditions: step_ok,
                ..Evaluation::plain(diversity(cur.view())?, product * dz)
            })
        }
        BoundKind::NoiseLemma3Msa | BoundKind::NoiseThm6Augmsa => {
            let eps = required(&inst.noise, "ε", kind)?;
            let layer = inst.msa.first().ok_or_else(|| Error::invalid(format!("{kind} instance has no layer")))?;
            let noisy_in = z + eps;
            let (clean, noisy) = if layer.shortcuts.is_empty() {
                (msa_forward(z, &layer.attn, false)?, msa_forward(&noisy_in, &layer.attn, false)?)
            } else {
                let act = layer.shortcut_activation;
                (
                    aug_msa_forward(z, &layer.attn, &layer.shortcuts, act, false)?,
                    aug_msa_forward(&noisy_in, &layer.attn, &layer.shortcuts, act, false)?,
                )
            };
            let heads = layer.attn.n_heads() as f64;
            let (lambda_eps, s, upsilon1) = ctx.msa_constants(layer, &noisy.attention)?;
            let mut lambda_delta = 0.0f64;
            for (a_eps, a) in noisy.attention.iter().zip(&clean.attention) {
                let delta = a_eps - a;
                lambda_delta = lambda_delta.max(ctx.spectral.perturbation_lambda(&delta)?);
            }
            let eps_norm = frobenius(eps.view());
            let mut noise_factor = (lambda_eps * heads).sqrt() * s * upsilon1;
            if !layer.shortcuts.is_empty() {
                let lip = ActivationSpec::new(layer.shortcut_activation).lipschitz;
                let mut theta_sum = 0.0;
                for sc in &layer.shortcuts {
                    theta_sum += ctx.shortcut_norm(sc)?;
                }
                ctx.note("shortcut_norm_sum", theta_sum);
                noise_factor += 1.0 + lip * theta_sum;
            }
            ctx.note("lambda_a_plus_delta", lambda_eps);
            ctx.note("lambda_delta", lambda_delta);
            ctx.note("s", s);
            ctx.note("upsilon1", upsilon1);
            ctx.note("eps_frobenius", eps_norm);
            let rhs = noise_factor * eps_norm + (lambda_delta * heads).sqrt() * s * upsilon1 * dz;
            let diff = &noisy.output - &clean.output;
            Ok(Evaluation::plain(diversity(diff.view())?, rhs))
        }
        BoundKind::NoiseLemma4Linear => {
            let eps = required(&inst.noise, "ε", kind)?;
            let theta = required(&inst.weight, "Θ", kind)?;
            let noisy = dense_shortcut(&(z + eps), theta, Activation::Identity)? * inst.gain;
            let clean = dense_shortcut(z, theta, Activation::Identity)? * inst.gain;
            let norm = ctx.norm(theta)?;
            let eps_norm = frobenius(eps.view());
            ctx.note("theta_norm", norm);
            ctx.note("eps_frobenius", eps_norm);
            Ok(Evaluation::plain(diversity((noisy - clean).view())?, inst.gain * norm * eps_norm))
        }
        BoundKind::NoiseThm5NonlinearStrict => {
            let eps = required(&inst.noise, "ε", kind)?;
            let theta = required(&inst.weight, "Θ", kind)?;
            let act = inst.activation;
            let x = dense_shortcut(&(z + eps), theta, act)? - dense_shortcut(z, theta, act)?;
            let lhs = diversity(x.view())?;
            let x_norm = frobenius(x.view());
            // ‖eeᵀX‖_F = √N·‖column mean‖
            let mean = x.mean_axis(Axis(0)).expect("nonempty");
            let mean_part = (x.nrows() as f64).sqrt() * mean.dot(&mean).sqrt();
            let lip = ActivationSpec::new(act).lipschitz;
            let rhs = lip * ctx.norm(theta)? * frobenius(eps.view());
            ctx.note("difference_frobenius", x_norm);
            ctx.note("difference_mean_part", mean_part);
            let nonzero_mean = mean_part > EQUALITY_TOL * x_norm;
            if nonzero_mean {
                // Strictness comes from the projection discarding the mean.
                Ok(Evaluation {
                    lhs,
                    rhs,
                    strict: true,
                    side_conditions: lhs < x_norm,
                })
            } else {
                Ok(Evaluation {
                    side_conditions: equal(lhs, x_norm),
                    ..Evaluation::plain(lhs, rhs)
                })
            }
        }
        BoundKind::NoiseDiversityTriangle => {
            let eps = required(&inst.noise, "ε", kind)?;
            let d_eps = diversity(eps.view())?;
            let eps_norm = frobenius(eps.view());
            let d_noisy = diversity((z + eps).view())?;
            ctx.note("d_eps", d_eps);
            ctx.note("eps_frobenius", eps_norm);
            let mean = eps.mean_axis(Axis(0)).expect("nonempty");
            let zero_mean = mean.iter().all(|m| m.abs() <= EQUALITY_TOL * eps_norm.max(f64::MIN_POSITIVE));
            let tail = if zero_mean { equal(d_eps, eps_norm) } else { holds(d_eps, eps_norm) };
            Ok(Evaluation {
                side_conditions: tail,
                ..Evaluation::plain((d_noisy - dz).abs(), d_eps)
            })
        }
    }
}
