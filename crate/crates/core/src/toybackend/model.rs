use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};
use crate::selfreport::{DigitTokenMap, DIGITS};
use crate::steering::{ResidualHook, SteeringPlan};
use crate::tensorio::{random_unit_vector, ActivationTensor, TokenRole};

use super::tokenizer::{ToyTokenizer, EOT};
use super::{choose_token, Backend, BackendContract, Capabilities, ChatMessage, DecodeParams, RenderedPrompt};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyModelConfig {
    pub seed: u64,
    pub layer_count: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_context: usize,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self { seed: 0, layer_count: 6, hidden_dim: 48, heads: 4, vocab_size: 64, max_context: 2048 }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if self.layer_count < super::MIN_LAYERS {
            return Err(Error::BandTooSmall { layer_count: self.layer_count });
        }
        if self.max_context == 0 || self.hidden_dim < 2 {
            return Err(Error::InvalidConfig("max_context and hidden_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Linear digit readout from one layer's residual stream.
///
/// Digit logit `i` is `bias[i] + gain * (i - 4.5) * proj`, where `proj` is
/// the mean over all positions of `h_layer · direction`.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitReadout<T> {
    pub layer: usize,
    pub direction: Vec<T>,
    pub gain: T,
    pub bias: [T; DIGITS],
}

struct Block<T> {
    wq: Vec<T>,
    wk: Vec<T>,
    wv: Vec<T>,
    wo: Vec<T>,
    w_up: Vec<T>,
    w_down: Vec<T>,
}

/// Pre-norm residual transformer with seeded random weights.
pub struct ToyModel<T> {
    config: ToyModelConfig,
    tokenizer: ToyTokenizer,
    contract: BackendContract,
    embed: Vec<T>,
    pos: Vec<T>,
    blocks: Vec<Block<T>>,
    unembed: Vec<T>,
    readout: Option<DigitReadout<T>>,
}

/// Cached keys, values and captured hidden states of a processed prefix.
#[derive(Debug, Clone)]
pub struct PrefixState<T> {
    tokens: Vec<u32>,
    roles: Vec<TokenRole>,
    /// Per layer, `[position][dim]`.
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    hidden: Vec<Vec<T>>,
    /// Per-position readout projections.
    readout: Vec<T>,
    logits: Vec<T>,
}

impl<T: Scalar> PrefixState<T> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn roles(&self) -> &[TokenRole] {
        &self.roles
    }

    /// Logits at the last processed position.
    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    /// Hidden states of the first `tokens` positions.
    pub fn capture(&self, tokens: usize) -> Result<ActivationTensor<T>> {
        if tokens == 0 || tokens > self.len() {
            return Err(Error::InvalidArgument(format!("capture of {tokens} of {} positions", self.len())));
        }
        let d = self.hidden[0].len() / self.len();
        let values = self.hidden.iter().flat_map(|h| h[..tokens * d].iter().copied()).collect();
        ActivationTensor::new(self.hidden.len(), tokens, d, values, self.roles[..tokens].to_vec())
    }
}

/// Output of processing new positions on top of an optional prefix.
struct Extension<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    hidden: Vec<Vec<T>>,
    readout: Vec<T>,
    logits: Vec<T>,
}

fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<T> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * scale)
        })
        .collect()
}

/// `x [rows x n_in] · w [n_in x n_out]`.
fn matmul<T: Scalar>(x: &[T], rows: usize, n_in: usize, w: &[T], n_out: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * n_out];
    for r in 0..rows {
        let xr = &x[r * n_in..(r + 1) * n_in];
        let or = &mut out[r * n_out..(r + 1) * n_out];
        for (i, &a) in xr.iter().enumerate() {
            let wr = &w[i * n_out..(i + 1) * n_out];
            for (o, &wv) in or.iter_mut().zip(wr) {
                *o += a * wv;
            }
        }
    }
    out
}

fn layer_norm<T: Scalar>(x: &[T], rows: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    let eps = T::lit(LN_EPS);
    let dn = T::from_usize_lossy(d);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let m = row.iter().copied().sum::<T>() / dn;
        let v = row.iter().map(|&a| (a - m) * (a - m)).sum::<T>() / dn;
        let s = (v + eps).sqrt();
        out.extend(row.iter().map(|&a| (a - m) / s));
    }
    out
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    T::lit(0.5) * x * (T::one() + (c * (x + T::lit(0.044715) * x * x * x)).tanh())
}

/// Removes the component of every row of `w [rows x d]` along unit `u`.
fn project_rows_orthogonal<T: Scalar>(w: &mut [T], d: usize, u: &[T]) {
    for row in w.chunks_mut(d) {
        let c = dot(row, u);
        for (a, &b) in row.iter_mut().zip(u) {
            *a -= c * b;
        }
    }
}

impl<T: Scalar> ToyModel<T> {
    /// Weights drawn from a standard normal scaled by `1/sqrt(hidden_dim)`.
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let tokenizer = ToyTokenizer::new(config.vocab_size)?;
        let (d, v) = (config.hidden_dim, config.vocab_size);
        let scale = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embed = gaussian(&mut rng, v * d, scale);
        let pos = gaussian(&mut rng, config.max_context * d, scale);
        let blocks = (0..config.layer_count)
            .map(|_| Block {
                wq: gaussian(&mut rng, d * d, scale),
                wk: gaussian(&mut rng, d * d, scale),
                wv: gaussian(&mut rng, d * d, scale),
                wo: gaussian(&mut rng, d * d, scale),
                w_up: gaussian(&mut rng, d * 4 * d, scale),
                w_down: gaussian(&mut rng, 4 * d * d, scale),
            })
            .collect();
        let unembed = gaussian(&mut rng, d * v, scale);
        let contract = BackendContract {
            layer_count: config.layer_count,
            hidden_dim: d,
            vocab_size: v,
            digit_token_map: DigitTokenMap::identity(v)?,
            capabilities: Capabilities { hooks: true, hidden_state_capture: true, generation: true },
        };
        contract.validate()?;
        Ok(Self { config, tokenizer, contract, embed, pos, blocks, unembed, readout: None })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &ToyTokenizer {
        &self.tokenizer
    }

    pub fn readout(&self) -> Option<&DigitReadout<T>> {
        self.readout.as_ref()
    }

    fn check_tokens(&self, start: usize, tokens: &[u32], roles: &[TokenRole]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("no tokens to process".into()));
        }
        if tokens.len() != roles.len() {
            return Err(Error::DimensionMismatch(format!("{} tokens with {} roles", tokens.len(), roles.len())));
        }
        let len = start + tokens.len();
        if len > self.config.max_context {
            return Err(Error::ContextOverflow { len, max: self.config.max_context });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidToken { id, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Processes `tokens` as positions following `prefix`.
    fn run(
        &self,
        prefix: Option<(&PrefixState<T>, usize)>,
        tokens: &[u32],
        roles: &[TokenRole],
        hook: Option<&dyn ResidualHook<T>>,
    ) -> Result<Extension<T>> {
        let p0 = prefix.map_or(0, |p| p.1);
        let prefix = prefix.map(|p| p.0);
        self.check_tokens(p0, tokens, roles)?;
        let (d, n) = (self.config.hidden_dim, tokens.len());
        let heads = self.config.heads;
        let hd = d / heads;
        let att_scale = T::lit(1.0 / (hd as f64).sqrt());

        let mut x: Vec<T> = Vec::with_capacity(n * d);
        for (i, &t) in tokens.iter().enumerate() {
            let e = &self.embed[t as usize * d..(t as usize + 1) * d];
            let p = &self.pos[(p0 + i) * d..(p0 + i + 1) * d];
            x.extend(e.iter().zip(p).map(|(&a, &b)| a + b));
        }

        let layers = self.config.layer_count;
        let mut ext = Extension {
            keys: Vec::with_capacity(layers),
            values: Vec::with_capacity(layers),
            hidden: Vec::with_capacity(layers),
            readout: Vec::new(),
            logits: Vec::new(),
        };
        let mut scores = vec![T::zero(); p0 + n];
        for (l, block) in self.blocks.iter().enumerate() {
            let a = layer_norm(&x, n, d);
            let q = matmul(&a, n, d, &block.wq, d);
            let k = matmul(&a, n, d, &block.wk, d);
            let v = matmul(&a, n, d, &block.wv, d);
            let (pk, pv): (&[T], &[T]) = match prefix {
                Some(p) => (&p.keys[l], &p.values[l]),
                None => (&[], &[]),
            };
            let key = |j: usize| if j < p0 { &pk[j * d..(j + 1) * d] } else { &k[(j - p0) * d..(j - p0 + 1) * d] };
            let val = |j: usize| if j < p0 { &pv[j * d..(j + 1) * d] } else { &v[(j - p0) * d..(j - p0 + 1) * d] };

            let mut attn = vec![T::zero(); n * d];
            for i in 0..n {
                let last = p0 + i;
                for h in 0..heads {
                    let qs = &q[i * d + h * hd..i * d + (h + 1) * hd];
                    let mut m = T::neg_infinity();
                    for (j, s) in scores[..=last].iter_mut().enumerate() {
                        *s = dot(qs, &key(j)[h * hd..(h + 1) * hd]) * att_scale;
                        m = m.max(*s);
                    }
                    let mut z = T::zero();
                    for s in scores[..=last].iter_mut() {
                        *s = (*s - m).exp();
                        z += *s;
                    }
                    let out = &mut attn[i * d + h * hd..i * d + (h + 1) * hd];
                    for (j, &s) in scores[..=last].iter().enumerate() {
                        let w = s / z;
                        for (o, &vv) in out.iter_mut().zip(&val(j)[h * hd..(h + 1) * hd]) {
                            *o += w * vv;
                        }
                    }
                }
            }
            let o = matmul(&attn, n, d, &block.wo, d);
            x.iter_mut().zip(&o).for_each(|(a, &b)| *a += b);

            let b = layer_norm(&x, n, d);
            let mut up = matmul(&b, n, d, &block.w_up, 4 * d);
            up.iter_mut().for_each(|u| *u = gelu(*u));
            let down = matmul(&up, n, 4 * d, &block.w_down, d);
            x.iter_mut().zip(&down).for_each(|(a, &b)| *a += b);

            if let Some(hook) = hook.filter(|h| h.hooks_layer(l)) {
                for i in 0..n {
                    hook.on_residual(l, p0 + i, &mut x[i * d..(i + 1) * d]);
                }
            }
            if let Some(r) = self.readout.as_ref().filter(|r| r.layer == l) {
                ext.readout = x.chunks(d).map(|row| dot(row, &r.direction)).collect();
            }
            ext.keys.push(k);
            ext.values.push(v);
            ext.hidden.push(x.clone());
        }

        let last = layer_norm(&x[(n - 1) * d..], 1, d);
        let mut logits = matmul(&last, 1, d, &self.unembed, self.config.vocab_size);
        if let Some(r) = &self.readout {
            // summed in position order so extensions match a full pass bit for bit
            let mut total = T::zero();
            for &v in prefix.map_or(&[][..], |p| &p.readout[..p0]).iter().chain(&ext.readout) {
                total += v;
            }
            let proj = total / T::from_usize_lossy(p0 + n);
            for (i, logit) in logits.iter_mut().take(DIGITS).enumerate() {
                *logit = r.bias[i] + r.gain * T::lit(i as f64 - 4.5) * proj;
            }
        }
        ext.logits = logits;
        Ok(ext)
    }

    /// Full forward pass keeping caches for later extension.
    pub fn forward_state(
        &self,
        tokens: &[u32],
        roles: &[TokenRole],
        hook: Option<&dyn ResidualHook<T>>,
    ) -> Result<PrefixState<T>> {
        let ext = self.run(None, tokens, roles, hook)?;
        Ok(PrefixState {
            tokens: tokens.to_vec(),
            roles: roles.to_vec(),
            keys: ext.keys,
            values: ext.values,
            hidden: ext.hidden,
            readout: ext.readout,
            logits: ext.logits,
        })
    }

    /// Appends positions to `state`. The hook must be the one `state` was built with.
    pub fn extend(
        &self,
        state: &mut PrefixState<T>,
        tokens: &[u32],
        roles: &[TokenRole],
        hook: Option<&dyn ResidualHook<T>>,
    ) -> Result<()> {
        let ext = self.run(Some((state, state.len())), tokens, roles, hook)?;
        state.tokens.extend_from_slice(tokens);
        state.roles.extend_from_slice(roles);
        for (l, ((k, v), h)) in ext.keys.into_iter().zip(ext.values).zip(ext.hidden).enumerate() {
            state.keys[l].extend(k);
            state.values[l].extend(v);
            state.hidden[l].extend(h);
        }
        state.readout.extend(ext.readout);
        state.logits = ext.logits;
        Ok(())
    }

    /// Last-position logits after appending `tokens` to the first
    /// `prefix_len` positions of `state`, leaving `state` untouched.
    pub fn extend_logits(
        &self,
        state: &PrefixState<T>,
        prefix_len: usize,
        tokens: &[u32],
        roles: &[TokenRole],
        hook: Option<&dyn ResidualHook<T>>,
    ) -> Result<Vec<T>> {
        if prefix_len == 0 || prefix_len > state.len() {
            return Err(Error::InvalidArgument(format!(
                "prefix of {prefix_len} positions from a {}-position state",
                state.len()
            )));
        }
        Ok(self.run(Some((state, prefix_len)), tokens, roles, hook)?.logits)
    }

    pub fn forward_capture_hooked(
        &self,
        tokens: &[u32],
        roles: &[TokenRole],
        hook: Option<&dyn ResidualHook<T>>,
    ) -> Result<(ActivationTensor<T>, Vec<T>)> {
        let state = self.forward_state(tokens, roles, hook)?;
        Ok((state.capture(state.len())?, state.logits))
    }

    /// Generated tokens, stopping before an end-of-turn token, at
    /// `max_new_tokens`, or when the context is full.
    pub fn generate_hooked(
        &self,
        prompt: &RenderedPrompt,
        decode: &DecodeParams,
        hook: Option<&dyn ResidualHook<T>>,
        seed: u64,
    ) -> Result<Vec<u32>> {
        decode.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = self.forward_state(&prompt.tokens, &prompt.roles, hook)?;
        let mut out = Vec::new();
        loop {
            let logits: Vec<f64> = state.logits.iter().map(|v| v.as_f64()).collect();
            let next = choose_token(&logits, decode, &mut rng) as u32;
            if next == EOT {
                break;
            }
            out.push(next);
            if out.len() == decode.max_new_tokens || state.len() + 1 >= self.config.max_context {
                break;
            }
            self.extend(&mut state, &[next], &[TokenRole::Assistant], hook)?;
        }
        Ok(out)
    }
}

impl<T: Scalar> Backend for ToyModel<T> {
    fn contract(&self) -> &BackendContract {
        &self.contract
    }

    fn render(&self, messages: &[ChatMessage], generation_prompt: bool) -> RenderedPrompt {
        self.tokenizer.render(messages, generation_prompt)
    }

    fn forward_capture(
        &self,
        prompt: &RenderedPrompt,
        plan: Option<&SteeringPlan<f64>>,
    ) -> Result<(ActivationTensor<f64>, Vec<f64>)> {
        let plan = plan.map(|p| p.cast::<T>());
        let hook = plan.as_ref().map(|p| p as &dyn ResidualHook<T>);
        let (t, logits) = self.forward_capture_hooked(&prompt.tokens, &prompt.roles, hook)?;
        Ok((t.cast(), logits.iter().map(|v| v.as_f64()).collect()))
    }

    fn generate(
        &self,
        prompt: &RenderedPrompt,
        decode: &DecodeParams,
        plan: Option<&SteeringPlan<f64>>,
        seed: u64,
    ) -> Result<Vec<u32>> {
        let plan = plan.map(|p| p.cast::<T>());
        let hook = plan.as_ref().map(|p| p as &dyn ResidualHook<T>);
        self.generate_hooked(prompt, decode, hook, seed)
    }

    fn decode_text(&self, tokens: &[u32]) -> String {
        self.tokenizer.decode(tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReadoutOptions {
    /// Logit change per digit step per unit of projection.
    pub gain: f64,
    /// Flip the readout sign so steering up lowers ratings.
    pub negated: bool,
}

impl Default for ReadoutOptions {
    fn default() -> Self {
        Self { gain: 0.25, negated: false }
    }
}

/// Toy whose digit logits read the middle layer along a seeded unit
/// direction `u`, returned alongside the model.
///
/// Every block's output projections are made orthogonal to `u`, so the
/// residual component along `u` changes only through the embeddings and
/// through steering. Steering along `u` therefore shifts the readout
/// linearly in alpha, and steering orthogonal to `u` leaves it unchanged.
pub fn build_introspective_toy<T: Scalar>(
    config: ToyModelConfig,
    options: ReadoutOptions,
) -> Result<(ToyModel<T>, Vec<T>)> {
    let mut model = ToyModel::<T>::new(config)?;
    let d = model.config.hidden_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x5eed_0f_u64.rotate_left(32));
    let u: Vec<T> = random_unit_vector(&mut rng, d).into_iter().map(T::lit).collect();
    for block in &mut model.blocks {
        project_rows_orthogonal(&mut block.wo, d, &u);
        project_rows_orthogonal(&mut block.w_down, d, &u);
    }
    let gain = if options.negated { -options.gain } else { options.gain };
    model.readout = Some(DigitReadout {
        layer: model.config.layer_count / 2,
        direction: u.clone(),
        gain: T::lit(gain),
        // mild preference for mid-scale ratings
        bias: std::array::from_fn(|i| T::lit(-((i as f64 - 5.0).powi(2)) / 8.0)),
    });
    Ok((model, u))
}

/// Default-sized introspective toy with the aligned (positive) readout.
pub fn make_introspective_toy(seed: u64) -> (ToyModel<f64>, Vec<f64>) {
    build_introspective_toy(ToyModelConfig { seed, ..Default::default() }, ReadoutOptions::default())
        .expect("default toy configuration is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::ConceptVectorSet;
    use crate::selfreport::{aggregate_digit_logits, expected_rating};
    use crate::steering::{build_plan, DEFAULT_ALPHAS};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn prompt(model: &ToyModel<f64>) -> RenderedPrompt {
        model.render(
            &[
                ChatMessage::system("You answer briefly."),
                ChatMessage::user("What do you think about rivers and 3 boats?"),
                ChatMessage::assistant("Rivers carry boats along quietly."),
                ChatMessage::rating_query("How calm are you, from 0 to 9?"),
            ],
            true,
        )
    }

    fn rating(model: &ToyModel<f64>, p: &RenderedPrompt, plan: Option<&SteeringPlan<f64>>) -> f64 {
        let (_, logits) = model.forward_capture(p, plan).unwrap();
        let d = aggregate_digit_logits(&logits, &model.contract().digit_token_map).unwrap();
        expected_rating(&d).expected
    }

    #[test]
    fn deterministic_and_valid_capture() {
        let m = ToyModel::<f64>::new(ToyModelConfig { seed: 3, ..Default::default() }).unwrap();
        let p = prompt(&m);
        let (a, la) = m.forward_capture(&p, None).unwrap();
        let (b, lb) = m.forward_capture(&p, None).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(la, lb);
        assert_eq!((a.layer_count(), a.token_count(), a.hidden_dim()), (6, p.len(), 48));
        assert_eq!(a.token_roles(), &p.roles[..]);
        assert_eq!(la.len(), 64);
    }

    #[test]
    fn zero_plan_is_identical_to_no_plan() {
        let (m, u) = make_introspective_toy(4);
        let set = ConceptVectorSet::uniform("c", &u, 6, 2, false).unwrap();
        let p = prompt(&m);
        let (a, la) = m.forward_capture(&p, None).unwrap();
        let (b, lb) = m.forward_capture(&p, Some(&build_plan(&set, 0.0))).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn hooked_layer_capture_adds_delta() {
        let m = ToyModel::<f64>::new(ToyModelConfig { seed: 5, ..Default::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dir = random_unit_vector(&mut rng, 48);
        let set = ConceptVectorSet::uniform("c", &dir, 6, 3, false).unwrap();
        let plan = build_plan(&set, 2.5);
        let first = plan.window[0];
        let p = prompt(&m);
        let (base, _) = m.forward_capture(&p, None).unwrap();
        let (steered, _) = m.forward_capture(&p, Some(&plan)).unwrap();
        for t in 0..p.len() {
            for l in 0..first {
                assert_eq!(base.hidden(l, t), steered.hidden(l, t));
            }
            for ((a, b), dl) in base.hidden(first, t).iter().zip(steered.hidden(first, t)).zip(&plan.deltas[&first]) {
                assert!((b - a - dl).abs() < 1e-12);
            }
        }
    }

    struct Counting {
        layers: Vec<usize>,
        calls: Vec<AtomicUsize>,
    }

    impl ResidualHook<f64> for Counting {
        fn hooks_layer(&self, layer: usize) -> bool {
            self.layers.contains(&layer)
        }

        fn on_residual(&self, layer: usize, _position: usize, _hidden: &mut [f64]) {
            self.calls[layer].fetch_add(1, Ordering::Relaxed);
        }
    }

    #[test]
    fn hooks_only_fire_on_their_layers() {
        let m = ToyModel::<f64>::new(ToyModelConfig::default()).unwrap();
        let p = prompt(&m);
        let hook = Counting { layers: vec![1, 4], calls: (0..6).map(|_| AtomicUsize::new(0)).collect() };
        m.forward_capture_hooked(&p.tokens, &p.roles, Some(&hook)).unwrap();
        let counts: Vec<usize> = hook.calls.iter().map(|c| c.load(Ordering::Relaxed)).collect();
        assert_eq!(counts, vec![0, p.len(), 0, 0, p.len(), 0]);
    }

    #[test]
    fn extension_matches_full_forward() {
        let (m, u) = make_introspective_toy(6);
        let set = ConceptVectorSet::uniform("c", &u, 6, 2, false).unwrap();
        let plan = build_plan(&set, -2.0);
        let p = prompt(&m);
        let cut = p.len() / 2;
        let mut state = m.forward_state(&p.tokens[..cut], &p.roles[..cut], Some(&plan)).unwrap();
        let logits = m.extend_logits(&state, cut, &p.tokens[cut..], &p.roles[cut..], Some(&plan)).unwrap();
        m.extend(&mut state, &p.tokens[cut..], &p.roles[cut..], Some(&plan)).unwrap();
        let (full, full_logits) = m.forward_capture_hooked(&p.tokens, &p.roles, Some(&plan)).unwrap();
        assert_eq!(logits, full_logits);
        assert_eq!(state.capture(p.len()).unwrap(), full);
        assert_eq!(state.capture(cut).unwrap(), full.prefix(cut).unwrap());
        // extending from a truncated view of the longer state
        let short = 5;
        let tail = &p.tokens[short..];
        let from_view = m.extend_logits(&state, short, tail, &p.roles[short..], Some(&plan)).unwrap();
        assert_eq!(from_view, full_logits);
    }

    #[test]
    fn input_errors() {
        let m = ToyModel::<f64>::new(ToyModelConfig { max_context: 8, ..Default::default() }).unwrap();
        let roles = vec![TokenRole::User; 9];
        assert!(matches!(
            m.forward_capture_hooked(&[1; 9], &roles, None),
            Err(Error::ContextOverflow { len: 9, max: 8 })
        ));
        assert!(matches!(m.forward_capture_hooked(&[64], &roles[..1], None), Err(Error::InvalidToken { id: 64, .. })));
        assert!(ToyModel::<f64>::new(ToyModelConfig { heads: 5, ..Default::default() }).is_err());
        assert!(ToyModel::<f64>::new(ToyModelConfig { layer_count: 3, ..Default::default() }).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let m = ToyModel::<f64>::new(ToyModelConfig { seed: 9, ..Default::default() }).unwrap();
        let p = m.render(&[ChatMessage::user("tell me something")], true);
        let g1 = m.generate(&p, &DecodeParams::greedy(16), None, 1).unwrap();
        let g2 = m.generate(&p, &DecodeParams::greedy(16), None, 2).unwrap();
        assert_eq!(g1, g2);
        assert!(g1.len() <= 16);
        let s = DecodeParams::sampled(0.8, 0.9, 16);
        assert_eq!(m.generate(&p, &s, None, 7).unwrap(), m.generate(&p, &s, None, 7).unwrap());
        let cold = DecodeParams::sampled(1e-9, 1.0, 16);
        assert_eq!(m.generate(&p, &cold, None, 3).unwrap(), g1);
        assert!(m.generate(&p, &DecodeParams::greedy(0), None, 1).is_err());
    }

    #[test]
    fn greedy_generation_matches_stepwise_argmax() {
        let m = ToyModel::<f64>::new(ToyModelConfig { seed: 10, ..Default::default() }).unwrap();
        let p = m.render(&[ChatMessage::user("a short question")], true);
        let g = m.generate(&p, &DecodeParams::greedy(6), None, 0).unwrap();
        let mut cur = p.clone();
        for &t in &g {
            let (_, logits) = m.forward_capture(&cur, None).unwrap();
            assert_eq!(super::super::argmax(&logits) as u32, t);
            cur = cur.with_completion(&[t]);
        }
    }

    #[test]
    fn aligned_readout_is_monotone_in_alpha() {
        let (m, u) = make_introspective_toy(11);
        let set = ConceptVectorSet::uniform("c", &u, 6, 2, false).unwrap();
        let p = prompt(&m);
        let base = rating(&m, &p, None);
        let r: Vec<f64> = DEFAULT_ALPHAS.iter().map(|&a| rating(&m, &p, Some(&build_plan(&set, a)))).collect();
        assert!(r.windows(2).all(|w| w[1] > w[0]), "{r:?}");
        assert_eq!(r[2], base);
    }

    #[test]
    fn negated_readout_is_decreasing_in_alpha() {
        let cfg = ToyModelConfig { seed: 11, ..Default::default() };
        let (m, u) =
            build_introspective_toy::<f64>(cfg, ReadoutOptions { negated: true, ..Default::default() }).unwrap();
        let set = ConceptVectorSet::uniform("c", &u, 6, 2, false).unwrap();
        let p = prompt(&m);
        let r: Vec<f64> = DEFAULT_ALPHAS.iter().map(|&a| rating(&m, &p, Some(&build_plan(&set, a)))).collect();
        assert!(r.windows(2).all(|w| w[1] < w[0]), "{r:?}");
    }

    #[test]
    fn orthogonal_steering_leaves_rating() {
        let (m, u) = make_introspective_toy(12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut w = random_unit_vector(&mut rng, 48);
        let c = dot(&w, &u);
        w.iter_mut().zip(&u).for_each(|(a, b)| *a -= c * b);
        let set = ConceptVectorSet::uniform("w", &w, 6, 2, false).unwrap();
        let p = prompt(&m);
        let base = rating(&m, &p, None);
        for a in DEFAULT_ALPHAS {
            assert!((rating(&m, &p, Some(&build_plan(&set, a))) - base).abs() < 1e-6);
        }
    }

    #[test]
    fn single_precision_model_runs() {
        let (m, _) = build_introspective_toy::<f32>(ToyModelConfig::default(), ReadoutOptions::default()).unwrap();
        let p = m.render(&[ChatMessage::user("hello")], true);
        let (t, logits) = m.forward_capture(&p, None).unwrap();
        assert_eq!(t.token_count(), p.len());
        assert!(logits.iter().all(|v| v.is_finite()));
    }
}
