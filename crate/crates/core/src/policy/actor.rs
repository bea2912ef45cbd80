use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{init_linear, linear};
use crate::autodiff::{load_params, save_params, ParamSet, Tape, Tensor, Var};
use crate::data::{Batch, NormStats};
use crate::error::{Error, Result};
use crate::ssm::{self, DiscreteSsm, SsmState, Spectrum, SumMode};

#[derive(Debug, Clone, PartialEq)]
pub struct ActorConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    /// Channel count `H`, also the width of every encoder and projection.
    pub hidden: usize,
    /// State size `N` per channel (even; stored as `N / 2` conjugate pairs).
    pub state_size: usize,
    pub blocks: usize,
    pub dropout: f64,
    /// Actions are squashed to `[-action_bound, action_bound]`.
    pub action_bound: f64,
    /// Truncate every convolution kernel to this many taps.
    pub kernel_taps: Option<usize>,
}

impl ActorConfig {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            hidden: 64,
            state_size: 64,
            blocks: 3,
            dropout: 0.1,
            action_bound: 1.0,
            kernel_taps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.action_dim == 0 || self.hidden == 0 || self.blocks == 0 {
            return Err(Error::invalid("actor dimensions must be positive"));
        }
        if self.state_size == 0 || self.state_size % 2 != 0 {
            return Err(Error::invalid(format!(
                "state size must be a positive even number, got {}",
                self.state_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.action_bound > 0.0) {
            return Err(Error::invalid("action bound must be positive"));
        }
        if self.kernel_taps == Some(0) {
            return Err(Error::invalid("kernel taps must be >= 1"));
        }
        Ok(())
    }

    pub fn modes(&self) -> usize {
        self.state_size / 2
    }
}

/// Recurrent context of the actor between two steps.
///
/// `prev_action` is the action produced by the last step and `prev_rtg` the
/// return-to-go it was conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCarry {
    /// `[block][channel]`
    pub blocks: Vec<Vec<SsmState>>,
    pub prev_action: Vec<f64>,
    pub prev_rtg: f64,
}

impl ActorCarry {
    pub fn zeros(blocks: usize, channels: usize, modes: usize, action_dim: usize) -> Self {
        Self {
            blocks: vec![vec![SsmState::zeros(modes); channels]; blocks],
            prev_action: vec![0.0; action_dim],
            prev_rtg: 0.0,
        }
    }

    pub fn reset(&mut self) {
        for st in self.blocks.iter_mut().flatten() {
            st.x.iter_mut().chain(st.comp.iter_mut()).for_each(|z| *z = Complex64::new(0.0, 0.0));
        }
        self.prev_action.iter_mut().for_each(|a| *a = 0.0);
        self.prev_rtg = 0.0;
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().flatten().all(SsmState::is_finite)
            && self.prev_action.iter().all(|a| a.is_finite())
            && self.prev_rtg.is_finite()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let channels = self.blocks.first().map_or(0, Vec::len);
        let modes = self.blocks.first().and_then(|b| b.first()).map_or(0, SsmState::modes);
        let mut out = Vec::new();
        for n in [self.blocks.len(), channels, modes, self.prev_action.len()] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for st in self.blocks.iter().flatten() {
            for z in st.x.iter().chain(&st.comp) {
                out.extend_from_slice(&z.re.to_le_bytes());
                out.extend_from_slice(&z.im.to_le_bytes());
            }
        }
        for a in &self.prev_action {
            out.extend_from_slice(&a.to_le_bytes());
        }
        out.extend_from_slice(&self.prev_rtg.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Checkpoint("malformed carry bytes".into());
        let u32_at = |i: usize| -> Result<usize> {
            let b = bytes.get(4 * i..4 * i + 4).ok_or_else(bad)?;
            Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        };
        let (nb, nc, nm, na) = (u32_at(0)?, u32_at(1)?, u32_at(2)?, u32_at(3)?);
        let floats = [nb, nc, nm, 4]
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .and_then(|v| v.checked_add(na + 1))
            .and_then(|v| v.checked_mul(8))
            .ok_or_else(bad)?;
        if bytes.len() != 16 + floats {
            return Err(bad());
        }
        let mut vals = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut next = || vals.next().expect("length checked");
        let mut blocks = Vec::with_capacity(nb);
        for _ in 0..nb {
            let mut chans = Vec::with_capacity(nc);
            for _ in 0..nc {
                let mut st = SsmState::zeros(nm);
                for z in st.x.iter_mut().chain(st.comp.iter_mut()) {
                    let re = next();
                    *z = Complex64::new(re, next());
                }
                chans.push(st);
            }
            blocks.push(chans);
        }
        let prev_action = (0..na).map(|_| next()).collect();
        Ok(Self {
            blocks,
            prev_action,
            prev_rtg: next(),
        })
    }
}

/// Raw inputs for a batch of tail-padded sequences.
///
/// Position `i` of row `b` carries the state `s_i`, the previous action
/// `a_{i-1}` and the return still to be collected from step `i` on.
#[derive(Debug, Clone, Copy)]
pub struct SequenceInput<'a> {
    pub batch: usize,
    pub len: usize,
    pub states: &'a [f64],
    pub prev_actions: &'a [f64],
    pub rtg: &'a [f64],
}

impl<'a> From<&'a Batch> for SequenceInput<'a> {
    fn from(b: &'a Batch) -> Self {
        Self {
            batch: b.batch,
            len: b.max_len,
            states: &b.states,
            prev_actions: &b.prev_actions,
            rtg: &b.rtg,
        }
    }
}

struct SsmVars {
    lam_re: Var,
    lam_im: Var,
    w_re: Var,
    w_im: Var,
    c_re: Var,
    c_im: Var,
    b_re: Var,
    b_im: Var,
    d: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorNetwork {
    pub cfg: ActorConfig,
    pub params: ParamSet,
    pub norm: NormStats,
}

pub(crate) fn block_prefix(i: usize) -> String {
    format!("block{i}")
}

fn is_frozen_ssm_name(name: &str) -> bool {
    [".ssm.log_neg_re", ".ssm.im", ".ssm.log_delta", ".ssm.c_re", ".ssm.c_im"]
        .iter()
        .any(|s| name.ends_with(s))
}

impl ActorNetwork {
    pub fn new(cfg: ActorConfig, norm: NormStats, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if norm.state_mean.len() != cfg.state_dim {
            return Err(Error::shape(
                "ActorNetwork::new",
                format!("normalization has {} features, state has {}", norm.state_mean.len(), cfg.state_dim),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, modes) = (cfg.hidden, cfg.modes());
        let mut p = ParamSet::new();
        init_linear(&mut p, "enc.state", cfg.state_dim, h, &mut rng);
        init_linear(&mut p, "enc.action", cfg.action_dim, h, &mut rng);
        init_linear(&mut p, "enc.rtg", 1, h, &mut rng);
        init_linear(&mut p, "in_proj", h, h, &mut rng);
        for i in 0..cfg.blocks {
            let pre = block_prefix(i);
            let mut lnr = Vec::with_capacity(h * modes);
            let mut im = Vec::with_capacity(h * modes);
            let mut cr = Vec::with_capacity(h * modes);
            let mut ci = Vec::with_capacity(h * modes);
            let mut log_delta = Vec::with_capacity(h);
            let mut d = Vec::with_capacity(h);
            for _ in 0..h {
                let ch = ssm::init_s4d_with(modes, &mut rng);
                for n in 0..modes {
                    lnr.push((-ch.lambda[n].re).ln());
                    im.push(ch.lambda[n].im);
                    cr.push(ch.c[n].re);
                    ci.push(ch.c[n].im);
                }
                log_delta.push(ch.log_delta);
                d.push(ch.d);
            }
            let mat = |v: Vec<f64>| Tensor::new(vec![h, modes], v).expect("shape matches data");
            p.insert(format!("{pre}.ssm.log_neg_re"), mat(lnr));
            p.insert(format!("{pre}.ssm.im"), mat(im));
            p.insert(format!("{pre}.ssm.c_re"), mat(cr));
            p.insert(format!("{pre}.ssm.c_im"), mat(ci));
            p.insert(format!("{pre}.ssm.log_delta"), Tensor::vector(log_delta));
            p.insert(format!("{pre}.ssm.d"), Tensor::vector(d));
            init_linear(&mut p, &format!("{pre}.mix"), h, h, &mut rng);
            p.insert(format!("{pre}.norm.gamma"), Tensor::filled(&[h], 1.0));
            p.insert(format!("{pre}.norm.beta"), Tensor::zeros(&[h]));
        }
        init_linear(&mut p, "out_proj", h, h, &mut rng);
        init_linear(&mut p, "head", h, cfg.action_dim, &mut rng);
        Ok(Self { cfg, params: p, norm })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Marks the continuous spectrum, step size and output matrix of every
    /// block as trainable or frozen.
    pub fn set_ssm_kernel_trainable(&mut self, trainable: bool) {
        self.params.set_trainable(is_frozen_ssm_name, trainable);
    }

    pub fn zero_carry(&self) -> ActorCarry {
        ActorCarry::zeros(self.cfg.blocks, self.cfg.hidden, self.cfg.modes(), self.cfg.action_dim)
    }

    fn ssm_vars(&self, tape: &mut Tape, i: usize) -> Result<SsmVars> {
        let pre = block_prefix(i);
        let (h, modes) = (self.cfg.hidden, self.cfg.modes());
        let get = |n: &str| self.params.get(&format!("{pre}.ssm.{n}"));
        let lnr = tape.param(&format!("{pre}.ssm.log_neg_re"), get("log_neg_re")?);
        let im = tape.param(&format!("{pre}.ssm.im"), get("im")?);
        let c_re = tape.param(&format!("{pre}.ssm.c_re"), get("c_re")?);
        let c_im = tape.param(&format!("{pre}.ssm.c_im"), get("c_im")?);
        let log_delta = tape.param(&format!("{pre}.ssm.log_delta"), get("log_delta")?);
        let d = tape.param(&format!("{pre}.ssm.d"), get("d")?);
        for v in [lnr, im, c_re, c_im] {
            if tape.shape(v) != [h, modes] {
                return Err(Error::shape("actor", format!("{pre}.ssm has shape {:?}", tape.shape(v))));
            }
        }

        // z = (delta / 2) lambda with lambda = -exp(log_neg_re) + i im.
        let delta = tape.exp(log_delta);
        let delta = tape.repeat_cols(delta, modes)?;
        let half = tape.scale(delta, 0.5);
        let neg_re = tape.exp(lnr);
        let zr = tape.mul(half, neg_re)?;
        let zr = tape.scale(zr, -1.0);
        let zi = tape.mul(half, im)?;
        // lambda_bar = (1 + z) / (1 - z), b_bar = delta / (1 - z).
        let one_m_zr = tape.scale(zr, -1.0);
        let one_m_zr = tape.add_scalar(one_m_zr, 1.0);
        let zr2 = tape.mul(zr, zr)?;
        let zi2 = tape.mul(zi, zi)?;
        let a2 = tape.mul(one_m_zr, one_m_zr)?;
        let den = tape.add(a2, zi2)?;
        let num = tape.add(zr2, zi2)?;
        let num = tape.scale(num, -1.0);
        let num = tape.add_scalar(num, 1.0);
        let lam_re = tape.div(num, den)?;
        let two_zi = tape.scale(zi, 2.0);
        let lam_im = tape.div(two_zi, den)?;
        let dr = tape.mul(delta, one_m_zr)?;
        let b_re = tape.div(dr, den)?;
        let di = tape.mul(delta, zi)?;
        let b_im = tape.div(di, den)?;
        // w = c * b_bar
        let t1 = tape.mul(c_re, b_re)?;
        let t2 = tape.mul(c_im, b_im)?;
        let w_re = tape.sub(t1, t2)?;
        let t3 = tape.mul(c_re, b_im)?;
        let t4 = tape.mul(c_im, b_re)?;
        let w_im = tape.add(t3, t4)?;
        Ok(SsmVars {
            lam_re,
            lam_im,
            w_re,
            w_im,
            c_re,
            c_im,
            b_re,
            b_im,
            d,
        })
    }

    fn kernel_var(&self, tape: &mut Tape, sv: &SsmVars, len: usize) -> Result<Var> {
        let powers = tape.complex_geom_powers(sv.lam_re, sv.lam_im, len)?;
        tape.realize_contract(sv.w_re, sv.w_im, powers, 2.0)
    }

    fn kernel_len(&self, seq_len: usize) -> usize {
        self.cfg.kernel_taps.map_or(seq_len, |k| k.min(seq_len))
    }

    /// Discretized convolution kernels, `[block][channel][lag]`.
    pub fn kernels(&self, len: usize) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut tape = Tape::new();
        let len = self.kernel_len(len);
        (0..self.cfg.blocks)
            .map(|i| {
                let sv = self.ssm_vars(&mut tape, i)?;
                let k = self.kernel_var(&mut tape, &sv, len)?;
                Ok(tape.value(k).chunks(len).map(<[f64]>::to_vec).collect())
            })
            .collect()
    }

    /// Per-block, per-channel discrete systems.
    pub fn discrete_ssms(&self) -> Result<Vec<Vec<DiscreteSsm>>> {
        let mut tape = Tape::new();
        (0..self.cfg.blocks)
            .map(|i| {
                let sv = self.ssm_vars(&mut tape, i)?;
                self.channel_systems(&tape, &sv)
            })
            .collect()
    }

    /// Continuous-time eigenvalues `[block][channel][mode]` of the stored
    /// half spectrum.
    pub fn continuous_eigenvalues(&self) -> Result<Vec<Vec<Vec<Complex64>>>> {
        let modes = self.cfg.modes();
        (0..self.cfg.blocks)
            .map(|i| {
                let pre = block_prefix(i);
                let lnr = self.params.get(&format!("{pre}.ssm.log_neg_re"))?.data();
                let im = self.params.get(&format!("{pre}.ssm.im"))?.data();
                Ok((0..self.cfg.hidden)
                    .map(|h| {
                        (0..modes)
                            .map(|n| Complex64::new(-lnr[h * modes + n].exp(), im[h * modes + n]))
                            .collect()
                    })
                    .collect())
            })
            .collect()
    }

    fn channel_systems(&self, tape: &Tape, sv: &SsmVars) -> Result<Vec<DiscreteSsm>> {
        let modes = self.cfg.modes();
        let cplx = |re: Var, im: Var, h: usize| -> Vec<Complex64> {
            (0..modes)
                .map(|n| Complex64::new(tape.value(re)[h * modes + n], tape.value(im)[h * modes + n]))
                .collect()
        };
        (0..self.cfg.hidden)
            .map(|h| {
                DiscreteSsm::new(
                    cplx(sv.lam_re, sv.lam_im, h),
                    cplx(sv.b_re, sv.b_im, h),
                    cplx(sv.c_re, sv.c_im, h),
                    Spectrum::ConjugatePairs,
                )
            })
            .collect()
    }

    fn normalized_inputs(
        &self,
        tape: &mut Tape,
        rows: usize,
        states: &[f64],
        prev_actions: &[f64],
        rtg: &[f64],
    ) -> Result<(Var, Var, Var)> {
        let (ds, da) = (self.cfg.state_dim, self.cfg.action_dim);
        if states.len() != rows * ds || prev_actions.len() != rows * da || rtg.len() != rows {
            return Err(Error::shape(
                "actor",
                format!(
                    "{rows} positions need {} state, {} action and {rows} rtg values; got {}, {}, {}",
                    rows * ds,
                    rows * da,
                    states.len(),
                    prev_actions.len(),
                    rtg.len()
                ),
            ));
        }
        let s: Vec<f64> = states.chunks(ds).flat_map(|s| self.norm.normalize_state(s)).collect();
        let r: Vec<f64> = rtg.iter().map(|&r| self.norm.normalize_rtg(r)).collect();
        let s = tape.input(&[rows, ds], s)?;
        let a = tape.input(&[rows, da], prev_actions.to_vec())?;
        let r = tape.input(&[rows, 1], r)?;
        Ok((s, a, r))
    }

    fn embed(&self, tape: &mut Tape, s: Var, a: Var, r: Var) -> Result<Var> {
        let es = linear(tape, &self.params, "enc.state", s)?;
        let es = tape.relu(es);
        let ea = linear(tape, &self.params, "enc.action", a)?;
        let ea = tape.relu(ea);
        let er = linear(tape, &self.params, "enc.rtg", r)?;
        let er = tape.relu(er);
        let sum = tape.add(es, ea)?;
        let sum = tape.add(sum, er)?;
        let x = linear(tape, &self.params, "in_proj", sum)?;
        Ok(tape.relu(x))
    }

    fn block_tail(&self, tape: &mut Tape, i: usize, h: Var, y: Var, train: bool, seed: u64) -> Result<Var> {
        let pre = block_prefix(i);
        let z = tape.gelu(y);
        let z = tape.dropout(z, self.cfg.dropout, seed.wrapping_mul(0x100_0193).wrapping_add(i as u64), train)?;
        let z = linear(tape, &self.params, &format!("{pre}.mix"), z)?;
        let res = tape.add(h, z)?;
        let g = tape.param(&format!("{pre}.norm.gamma"), self.params.get(&format!("{pre}.norm.gamma"))?);
        let b = tape.param(&format!("{pre}.norm.beta"), self.params.get(&format!("{pre}.norm.beta"))?);
        tape.layer_norm(res, g, b)
    }

    fn head(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let o = linear(tape, &self.params, "out_proj", h)?;
        let o = tape.relu(o);
        let o = linear(tape, &self.params, "head", o)?;
        let o = tape.tanh(o);
        Ok(tape.scale(o, self.cfg.action_bound))
    }

    /// Convolution-view forward over `[batch * len]` positions; returns the
    /// predicted actions `[batch * len, action_dim]`.
    pub fn forward_sequence_tape(&self, tape: &mut Tape, input: SequenceInput<'_>, train: bool, seed: u64) -> Result<Var> {
        let SequenceInput {
            batch,
            len,
            states,
            prev_actions,
            rtg,
        } = input;
        if batch == 0 || len == 0 {
            return Err(Error::shape("actor", "empty sequence batch"));
        }
        let (s, a, r) = self.normalized_inputs(tape, batch * len, states, prev_actions, rtg)?;
        let mut h = self.embed(tape, s, a, r)?;
        let klen = self.kernel_len(len);
        for i in 0..self.cfg.blocks {
            let sv = self.ssm_vars(tape, i)?;
            let k = self.kernel_var(tape, &sv, klen)?;
            let conv = tape.fft_conv(k, h, batch, len)?;
            let skip = tape.mul_row(h, sv.d)?;
            let y = tape.add(conv, skip)?;
            h = self.block_tail(tape, i, h, y, train, seed)?;
        }
        self.head(tape, h)
    }

    /// Inference over one trajectory; rows are positions.
    pub fn forward_sequence(&self, states: &[Vec<f64>], prev_actions: &[Vec<f64>], rtg: &[f64]) -> Result<Vec<Vec<f64>>> {
        let len = states.len();
        if prev_actions.len() != len || rtg.len() != len {
            return Err(Error::shape(
                "actor_forward_sequence",
                format!("{len} states, {} actions, {} rtg", prev_actions.len(), rtg.len()),
            ));
        }
        let s: Vec<f64> = states.concat();
        let a: Vec<f64> = prev_actions.concat();
        let mut tape = Tape::new();
        let out = self.forward_sequence_tape(
            &mut tape,
            SequenceInput {
                batch: 1,
                len,
                states: &s,
                prev_actions: &a,
                rtg,
            },
            false,
            0,
        )?;
        Ok(tape.value(out).chunks(self.cfg.action_dim).map(<[f64]>::to_vec).collect())
    }

    /// Recurrent-view forward of one step for a batch of carries; returns the
    /// actions `[batch, action_dim]` on the tape and the advanced carries.
    ///
    /// The state readout enters the tape as a constant, so gradients reach
    /// everything except the SSM spectrum, step size and output matrix
    /// through the recurrent history.
    #[allow(clippy::too_many_arguments)]
    pub fn step_tape(
        &self,
        tape: &mut Tape,
        carries: &[&ActorCarry],
        states: &[f64],
        prev_actions: &[f64],
        rtg: &[f64],
        mode: SumMode,
        train: bool,
        seed: u64,
    ) -> Result<(Var, Vec<ActorCarry>)> {
        let batch = carries.len();
        if batch == 0 {
            return Err(Error::shape("actor_forward_step", "no carries"));
        }
        let (hid, modes) = (self.cfg.hidden, self.cfg.modes());
        for c in carries {
            if c.blocks.len() != self.cfg.blocks
                || c.blocks.iter().any(|b| b.len() != hid || b.iter().any(|s| s.modes() != modes || s.comp.len() != modes))
            {
                return Err(Error::shape("actor_forward_step", "carry dimensions do not match the network"));
            }
            if !c.is_finite() {
                return Err(Error::Divergence("carry is not finite".into()));
            }
        }
        let (s, a, r) = self.normalized_inputs(tape, batch, states, prev_actions, rtg)?;
        let mut h = self.embed(tape, s, a, r)?;
        let mut next: Vec<ActorCarry> = carries.iter().map(|c| (*c).clone()).collect();
        for i in 0..self.cfg.blocks {
            let sv = self.ssm_vars(tape, i)?;
            let systems = self.channel_systems(tape, &sv)?;
            let mut z = Vec::with_capacity(batch * hid * modes);
            for c in carries {
                for (ch, st) in c.blocks[i].iter().enumerate() {
                    for n in 0..modes {
                        z.push(systems[ch].lambda_bar[n] * st.value(n));
                    }
                }
            }
            let carried = tape.carry_readout(sv.c_re, sv.c_im, z, 2.0)?;
            let k0 = self.kernel_var(tape, &sv, 1)?;
            let fresh = tape.fft_conv(k0, h, batch, 1)?;
            let skip = tape.mul_row(h, sv.d)?;
            let y = tape.add(carried, fresh)?;
            let y = tape.add(y, skip)?;
            let u = tape.value(h).to_vec();
            for (b, nc) in next.iter_mut().enumerate() {
                for (ch, st) in nc.blocks[i].iter_mut().enumerate() {
                    ssm::advance(&systems[ch], st, u[b * hid + ch], mode);
                }
            }
            h = self.block_tail(tape, i, h, y, train, seed)?;
        }
        let out = self.head(tape, h)?;
        let da = self.cfg.action_dim;
        for (b, nc) in next.iter_mut().enumerate() {
            if !nc.is_finite() {
                return Err(Error::Divergence("recurrent state diverged".into()));
            }
            nc.prev_action = tape.value(out)[b * da..(b + 1) * da].to_vec();
            nc.prev_rtg = rtg[b];
        }
        Ok((out, next))
    }

    /// One inference step of the recurrent view.
    pub fn forward_step(
        &self,
        carry: &ActorCarry,
        state: &[f64],
        prev_action: &[f64],
        prev_rtg: f64,
        mode: SumMode,
    ) -> Result<(Vec<f64>, ActorCarry)> {
        let mut tape = Tape::new();
        let (out, mut next) = self.step_tape(&mut tape, &[carry], state, prev_action, &[prev_rtg], mode, false, 0)?;
        Ok((tape.value(out).to_vec(), next.pop().expect("one carry")))
    }

    pub fn to_param_set(&self) -> ParamSet {
        let mut p = self.params.clone();
        let c = &self.cfg;
        let arch = [c.state_dim, c.action_dim, c.hidden, c.state_size, c.blocks, c.kernel_taps.unwrap_or(0)];
        p.insert("meta.arch", Tensor::vector(arch.iter().map(|&v| v as f64).collect()));
        p.insert("meta.dropout", Tensor::scalar(c.dropout));
        p.insert("meta.action_bound", Tensor::scalar(c.action_bound));
        p.insert("norm.state_mean", Tensor::vector(self.norm.state_mean.clone()));
        p.insert("norm.state_std", Tensor::vector(self.norm.state_std.clone()));
        p.insert(
            "norm.returns",
            Tensor::vector(vec![self.norm.return_scale, self.norm.return_min, self.norm.return_best]),
        );
        p
    }

    pub fn from_param_set(mut p: ParamSet) -> Result<Self> {
        let mut take = |n: &str| p.remove(n).ok_or_else(|| Error::Checkpoint(format!("missing `{n}`")));
        let arch = take("meta.arch")?;
        let [sd, ad, h, n, nb, taps] = <[f64; 6]>::try_from(arch.data())
            .map_err(|_| Error::Checkpoint("`meta.arch` must hold 6 values".into()))?;
        let cfg = ActorConfig {
            state_dim: sd as usize,
            action_dim: ad as usize,
            hidden: h as usize,
            state_size: n as usize,
            blocks: nb as usize,
            dropout: take("meta.dropout")?.item()?,
            action_bound: take("meta.action_bound")?.item()?,
            kernel_taps: (taps > 0.0).then_some(taps as usize),
        };
        let rets = take("norm.returns")?;
        let [scale, rmin, best] = <[f64; 3]>::try_from(rets.data())
            .map_err(|_| Error::Checkpoint("`norm.returns` must hold 3 values".into()))?;
        let norm = NormStats {
            state_mean: take("norm.state_mean")?.into_data(),
            state_std: take("norm.state_std")?.into_data(),
            return_scale: scale,
            return_min: rmin,
            return_best: best,
        };
        cfg.validate()?;
        let reference = Self::new(cfg.clone(), norm.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = p.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if p.len() != reference.params.len() {
            return Err(Error::Checkpoint("checkpoint has unexpected parameters".into()));
        }
        Ok(Self { cfg, params: p, norm })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_params(path, &self.to_param_set())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_param_set(load_params(path)?)
    }

    /// Random actor for tests and tooling.
    pub fn random(cfg: ActorConfig, rng: &mut impl Rng) -> Result<Self> {
        let norm = NormStats::identity(cfg.state_dim);
        Self::new(cfg, norm, rng.random())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_gradients, project, GradCheckConfig};

    fn small_cfg() -> ActorConfig {
        ActorConfig {
            hidden: 6,
            state_size: 4,
            dropout: 0.0,
            ..ActorConfig::new(3, 2)
        }
    }

    fn inputs(len: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (0..len).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let a = (0..len).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let r = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        (s, a, r)
    }

    fn iterate_steps(net: &ActorNetwork, s: &[Vec<f64>], a: &[Vec<f64>], r: &[f64]) -> Vec<Vec<f64>> {
        let mut carry = net.zero_carry();
        let mut out = Vec::new();
        for t in 0..s.len() {
            let (y, c) = net.forward_step(&carry, &s[t], &a[t], r[t], SumMode::Naive).unwrap();
            carry = c;
            out.push(y);
        }
        out
    }

    #[test]
    fn sequence_and_step_views_agree() {
        for seed in 0..3 {
            let net = ActorNetwork::random(small_cfg(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let (s, a, r) = inputs(64, seed);
            let seq = net.forward_sequence(&s, &a, &r).unwrap();
            let step = iterate_steps(&net, &s, &a, &r);
            for (x, y) in seq.iter().flatten().zip(step.iter().flatten()) {
                assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn single_position_matches_first_step() {
        let net = ActorNetwork::random(small_cfg(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (s, a, r) = inputs(1, 4);
        let seq = net.forward_sequence(&s, &a, &r).unwrap();
        let (y, _) = net.forward_step(&net.zero_carry(), &s[0], &a[0], r[0], SumMode::Compensated).unwrap();
        for (p, q) in seq[0].iter().zip(&y) {
            assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_head_gives_zero_actions() {
        let mut net = ActorNetwork::random(small_cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for n in ["head.w", "head.b"] {
            net.params.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let out = net.forward_sequence(&vec![vec![0.0; 3]; 4], &vec![vec![0.0; 2]; 4], &[0.0; 4]).unwrap();
        assert!(out.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn output_dimension_and_bounds() {
        let cfg = ActorConfig {
            action_bound: 0.5,
            ..small_cfg()
        };
        let net = ActorNetwork::random(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (s, a, r) = inputs(10, 2);
        let out = net.forward_sequence(&s, &a, &r).unwrap();
        assert_eq!(out.len(), 10);
        assert!(out.iter().all(|o| o.len() == 2 && o.iter().all(|v| v.abs() <= 0.5)));
        assert!(net.forward_sequence(&s, &a[..9], &r).is_err());
        assert!(net.forward_step(&net.zero_carry(), &[0.0; 2], &[0.0; 2], 0.0, SumMode::Naive).is_err());
    }

    #[test]
    fn default_parameter_count_is_stable() {
        let net = ActorNetwork::new(ActorConfig::new(3, 1), NormStats::identity(3), 0).unwrap();
        let h = 64;
        let enc = (3 * h + h) + (h + h) + (h + h);
        let lin = h * h + h;
        let block = 4 * h * 32 + 2 * h + lin + 2 * h;
        let expected = enc + lin + 3 * block + lin + (h + 1);
        assert_eq!(expected, 46_721);
        assert_eq!(net.param_count(), expected);
    }

    #[test]
    fn carry_bytes_round_trip() {
        let net = ActorNetwork::random(small_cfg(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let (s, a, r) = inputs(5, 7);
        let mut carry = net.zero_carry();
        for t in 0..5 {
            carry = net.forward_step(&carry, &s[t], &a[t], r[t], SumMode::Compensated).unwrap().1;
        }
        let back = ActorCarry::from_bytes(&carry.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), carry.to_bytes());
        assert_eq!(back, carry);
        assert!(ActorCarry::from_bytes(&carry.to_bytes()[1..]).is_err());
        let mut z = carry.clone();
        z.reset();
        assert_eq!(z, net.zero_carry());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let cfg = ActorConfig {
            kernel_taps: Some(5),
            ..small_cfg()
        };
        let net = ActorNetwork::random(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        net.save(&path).unwrap();
        let back = ActorNetwork::load(&path).unwrap();
        assert_eq!(back.cfg, net.cfg);
        assert_eq!(back.norm, net.norm);
        assert_eq!(back.params, net.params);
    }

    #[test]
    fn kernels_match_ssm_core() {
        let net = ActorNetwork::random(small_cfg(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let ks = net.kernels(12).unwrap();
        let sys = net.discrete_ssms().unwrap();
        for (bk, bs) in ks.iter().zip(&sys) {
            for (k, s) in bk.iter().zip(bs) {
                let want = ssm::compute_kernel(s, 12).unwrap();
                for (x, y) in k.iter().zip(&want.k) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sequence_gradients_match_finite_differences() {
        let net = ActorNetwork::random(small_cfg(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let (s, a, r) = inputs(6, 11);
        let (s, a) = (s.concat(), a.concat());
        let cfg = GradCheckConfig::default();
        let rep = check_gradients(&net.params, &cfg, |tape, p| {
            let n = ActorNetwork {
                params: p.clone(),
                ..net.clone()
            };
            let y = n.forward_sequence_tape(
                tape,
                SequenceInput {
                    batch: 2,
                    len: 3,
                    states: &s,
                    prev_actions: &a,
                    rtg: &r,
                },
                false,
                0,
            )?;
            project(tape, y, 1)
        })
        .unwrap();
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
    }

    #[test]
    fn truncated_kernel_limits_memory() {
        let cfg = ActorConfig {
            kernel_taps: Some(2),
            blocks: 1,
            ..small_cfg()
        };
        let net = ActorNetwork::random(cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let (mut s, a, r) = inputs(8, 8);
        let before = net.forward_sequence(&s, &a, &r).unwrap();
        s[0][0] += 1.0;
        let after = net.forward_sequence(&s, &a, &r).unwrap();
        assert_ne!(before[1], after[1]);
        assert_eq!(before[2..], after[2..]);
    }
}
