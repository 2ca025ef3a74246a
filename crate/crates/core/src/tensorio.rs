//! Data model for activations, conversations and observations.
//!
//! Activation dumps are directories holding `manifest.json` and `values.bin`
//! (little-endian `f32`, row-major `[layer][token][dim]`). Conversations and
//! observations are line-delimited JSON.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{norm, Scalar};
use crate::selfreport::SelfReport;

pub const DUMP_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VALUES_FILE: &str = "values.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    System,
    User,
    Assistant,
    RatingQuery,
}

/// Selects the token positions that take part in pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoleFilter {
    All,
    Only(TokenRole),
    AllExcept(TokenRole),
    /// The last contiguous run of tokens carrying this role.
    LastSpan(TokenRole),
}

impl RoleFilter {
    pub fn select(&self, roles: &[TokenRole]) -> Vec<usize> {
        match *self {
            RoleFilter::All => (0..roles.len()).collect(),
            RoleFilter::Only(r) => positions(roles, |x| x == r),
            RoleFilter::AllExcept(r) => positions(roles, |x| x != r),
            RoleFilter::LastSpan(r) => {
                let Some(end) = roles.iter().rposition(|&x| x == r) else {
                    return Vec::new();
                };
                let start = roles[..end].iter().rposition(|&x| x != r).map_or(0, |i| i + 1);
                (start..=end).collect()
            }
        }
    }
}

fn positions(roles: &[TokenRole], keep: impl Fn(TokenRole) -> bool) -> Vec<usize> {
    roles.iter().enumerate().filter(|(_, &r)| keep(r)).map(|(i, _)| i).collect()
}

/// Post-block hidden states of one forward pass, indexed `[layer][token][dim]`.
///
/// Layer `0` is the output of the first transformer block; the embedding
/// output is never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor<T> {
    layer_count: usize,
    token_count: usize,
    hidden_dim: usize,
    values: Vec<T>,
    token_roles: Vec<TokenRole>,
    meta: BTreeMap<String, String>,
}

impl<T: Scalar> ActivationTensor<T> {
    pub fn new(
        layer_count: usize,
        token_count: usize,
        hidden_dim: usize,
        values: Vec<T>,
        token_roles: Vec<TokenRole>,
    ) -> Result<Self> {
        let expected = layer_count * token_count * hidden_dim;
        if values.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{layer_count}x{token_count}x{hidden_dim} tensor needs {expected} values, got {}",
                values.len()
            )));
        }
        if token_roles.len() != token_count {
            return Err(Error::DimensionMismatch(format!(
                "{} token roles for {token_count} tokens",
                token_roles.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("activation value at flat index {i}")));
        }
        Ok(Self { layer_count, token_count, hidden_dim, values, token_roles, meta: BTreeMap::new() })
    }

    pub fn zeros(
        layer_count: usize,
        token_count: usize,
        hidden_dim: usize,
        token_roles: Vec<TokenRole>,
    ) -> Result<Self> {
        Self::new(
            layer_count,
            token_count,
            hidden_dim,
            vec![T::zero(); layer_count * token_count * hidden_dim],
            token_roles,
        )
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn layer_count(&self) -> usize {
        self.layer_count
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn token_roles(&self) -> &[TokenRole] {
        &self.token_roles
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    fn offset(&self, layer: usize, token: usize) -> usize {
        assert!(layer < self.layer_count && token < self.token_count);
        (layer * self.token_count + token) * self.hidden_dim
    }

    #[inline]
    pub fn hidden(&self, layer: usize, token: usize) -> &[T] {
        let o = self.offset(layer, token);
        &self.values[o..o + self.hidden_dim]
    }

    #[inline]
    pub fn hidden_mut(&mut self, layer: usize, token: usize) -> &mut [T] {
        let o = self.offset(layer, token);
        &mut self.values[o..o + self.hidden_dim]
    }

    /// The first `tokens` positions of every layer.
    pub fn prefix(&self, tokens: usize) -> Result<Self> {
        if tokens == 0 || tokens > self.token_count {
            return Err(Error::InvalidArgument(format!(
                "prefix of {tokens} tokens from a {}-token tensor",
                self.token_count
            )));
        }
        let stride = self.token_count * self.hidden_dim;
        let values = (0..self.layer_count)
            .flat_map(|l| self.values[l * stride..l * stride + tokens * self.hidden_dim].iter().copied())
            .collect();
        Ok(Self {
            layer_count: self.layer_count,
            token_count: tokens,
            hidden_dim: self.hidden_dim,
            values,
            token_roles: self.token_roles[..tokens].to_vec(),
            meta: self.meta.clone(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> ActivationTensor<U> {
        ActivationTensor {
            layer_count: self.layer_count,
            token_count: self.token_count,
            hidden_dim: self.hidden_dim,
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
            token_roles: self.token_roles.clone(),
            meta: self.meta.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DumpManifest {
    format_version: u32,
    layer_count: usize,
    token_count: usize,
    hidden_dim: usize,
    dtype: String,
    endianness: String,
    layout: String,
    token_roles: Vec<TokenRole>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

/// Writes `tensor` as a dump directory, creating it if needed.
pub fn save_dump<T: Scalar>(tensor: &ActivationTensor<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut payload = Vec::with_capacity(tensor.values.len() * 4);
    for (i, v) in tensor.values.iter().enumerate() {
        let x = v.as_f64() as f32;
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("value at flat index {i} does not fit in f32")));
        }
        payload.extend_from_slice(&x.to_le_bytes());
    }
    let manifest = DumpManifest {
        format_version: DUMP_FORMAT_VERSION,
        layer_count: tensor.layer_count,
        token_count: tensor.token_count,
        hidden_dim: tensor.hidden_dim,
        dtype: "float32".into(),
        endianness: "little".into(),
        layout: "layer,token,dim".into(),
        token_roles: tensor.token_roles.clone(),
        meta: tensor.meta.clone(),
    };
    fs::write(dir.join(VALUES_FILE), payload)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dump<T: Scalar>(dir: &Path) -> Result<ActivationTensor<T>> {
    let manifest: DumpManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format_version != DUMP_FORMAT_VERSION {
        return Err(Error::UnsupportedFormatVersion(manifest.format_version));
    }
    if manifest.dtype != "float32" || manifest.endianness != "little" {
        return Err(Error::InvalidArgument(format!(
            "unsupported payload encoding {} / {}",
            manifest.dtype, manifest.endianness
        )));
    }
    let bytes = fs::read(dir.join(VALUES_FILE))?;
    let expected = manifest.layer_count * manifest.token_count * manifest.hidden_dim;
    if bytes.len() != expected * 4 {
        return Err(Error::DimensionMismatch(format!(
            "manifest declares {}x{}x{} = {expected} values, payload holds {} bytes",
            manifest.layer_count,
            manifest.token_count,
            manifest.hidden_dim,
            bytes.len()
        )));
    }
    let values = bytes.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
    let mut tensor = ActivationTensor::new(
        manifest.layer_count,
        manifest.token_count,
        manifest.hidden_dim,
        values,
        manifest.token_roles,
    )?;
    tensor.meta = manifest.meta;
    Ok(tensor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub user: String,
    pub assistant: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub topic: String,
    pub turns: Vec<Turn>,
    #[serde(default)]
    pub gen_params: BTreeMap<String, serde_json::Value>,
}

impl Conversation {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.turns.is_empty() {
            return Err(format!("conversation `{}` has no turns", self.id));
        }
        Ok(())
    }
}

/// One (conversation, turn, concept, steering) measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub conversation_id: String,
    /// One-based turn index.
    pub turn: usize,
    pub concept: String,
    pub steer_concept: Option<String>,
    pub alpha: f64,
    /// Sign-corrected probe score of the conversation before the rating query.
    pub probe_score_prev: f64,
    pub report: SelfReport<f64>,
    pub seed: u64,
}

impl Observation {
    pub fn key(&self) -> (String, usize, String, Option<String>, u64) {
        (
            self.conversation_id.clone(),
            self.turn,
            self.concept.clone(),
            self.steer_concept.clone(),
            self.alpha.to_bits(),
        )
    }
}

fn read_jsonl<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, R)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::MalformedRecord { line: idx + 1, message: e.to_string() })?;
        out.push((idx + 1, record));
    }
    Ok(out)
}

fn write_jsonl<R: Serialize>(records: &[R], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_conversations(path: &Path) -> Result<Vec<Conversation>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, conv) in read_jsonl::<Conversation>(path)? {
        conv.validate().map_err(|message| Error::MalformedRecord { line, message })?;
        if !seen.insert(conv.id.clone()) {
            return Err(Error::DuplicateId(conv.id));
        }
        out.push(conv);
    }
    Ok(out)
}

pub fn write_conversations(conversations: &[Conversation], path: &Path) -> Result<()> {
    let mut seen = HashSet::new();
    for c in conversations {
        c.validate().map_err(Error::InvalidArgument)?;
        if !seen.insert(c.id.as_str()) {
            return Err(Error::DuplicateId(c.id.clone()));
        }
    }
    write_jsonl(conversations, path)
}

fn check_unique_observations(observations: &[Observation]) -> Result<()> {
    let mut seen = HashSet::new();
    for o in observations {
        if !seen.insert(o.key()) {
            return Err(Error::DuplicateId(format!(
                "observation ({}, turn {}, {}, steer {:?}, alpha {})",
                o.conversation_id, o.turn, o.concept, o.steer_concept, o.alpha
            )));
        }
    }
    Ok(())
}

/// Writes observations in the given order, rejecting duplicate uniqueness keys.
pub fn write_observations(observations: &[Observation], path: &Path) -> Result<()> {
    check_unique_observations(observations)?;
    write_jsonl(observations, path)
}

pub fn read_observations(path: &Path) -> Result<Vec<Observation>> {
    let out: Vec<Observation> = read_jsonl(path)?.into_iter().map(|(_, o)| o).collect();
    check_unique_observations(&out)?;
    Ok(out)
}

/// Synthetic two-pole activations with a known direction planted at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedFixture {
    pub seed: u64,
    pub layer_count: usize,
    pub hidden_dim: usize,
    pub samples_per_pole: usize,
    /// Zero-based layer carrying the pole separation.
    pub planted_layer: usize,
    pub planted_direction: Vec<f64>,
    pub effect_size: f64,
    pub noise_sd: f64,
}

impl PlantedFixture {
    /// Fixture whose planted direction is an isotropic unit vector drawn from `seed`.
    pub fn with_random_direction(
        seed: u64,
        layer_count: usize,
        hidden_dim: usize,
        samples_per_pole: usize,
        planted_layer: usize,
        effect_size: f64,
        noise_sd: f64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        Self {
            seed,
            layer_count,
            hidden_dim,
            samples_per_pole,
            planted_layer,
            planted_direction: random_unit_vector(&mut rng, hidden_dim),
            effect_size,
            noise_sd,
        }
    }
}

pub(crate) fn random_unit_vector<R: rand::Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Generates one single-token assistant tensor per sample and pole.
///
/// Every sample shares a per-layer base vector. Positive samples add
/// `effect_size * planted_direction` at the planted layer; both poles add
/// isotropic Gaussian noise everywhere, scaled so that its expected squared
/// norm is `noise_sd^2` (coordinate sd `noise_sd / sqrt(hidden_dim)`).
/// Effect size and noise are therefore both norms in hidden-state space.
pub fn make_planted_fixture<T: Scalar>(
    cfg: &PlantedFixture,
) -> Result<(Vec<ActivationTensor<T>>, Vec<ActivationTensor<T>>)> {
    if cfg.hidden_dim < 2 {
        return Err(Error::InvalidArgument("hidden_dim must be at least 2".into()));
    }
    if cfg.planted_layer >= cfg.layer_count {
        return Err(Error::InvalidArgument(format!(
            "planted layer {} outside 0..{}",
            cfg.planted_layer, cfg.layer_count
        )));
    }
    if !(cfg.effect_size >= 0.0 && cfg.noise_sd >= 0.0) || cfg.samples_per_pole == 0 {
        return Err(Error::InvalidArgument(
            "effect_size and noise_sd must be non-negative, samples_per_pole positive".into(),
        ));
    }
    if cfg.planted_direction.len() != cfg.hidden_dim || (norm(&cfg.planted_direction) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("planted_direction must be a unit vector of length hidden_dim".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base: Vec<Vec<f64>> =
        (0..cfg.layer_count).map(|_| (0..cfg.hidden_dim).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();

    let coord_sd = cfg.noise_sd / (cfg.hidden_dim as f64).sqrt();
    let mut make = |positive: bool| -> Result<ActivationTensor<T>> {
        let mut values = Vec::with_capacity(cfg.layer_count * cfg.hidden_dim);
        for (layer, b) in base.iter().enumerate() {
            for (d, &bv) in b.iter().enumerate() {
                let mut v = bv;
                if positive && layer == cfg.planted_layer {
                    v += cfg.effect_size * cfg.planted_direction[d];
                }
                if cfg.noise_sd > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v += coord_sd * z;
                }
                values.push(T::lit(v));
            }
        }
        ActivationTensor::new(cfg.layer_count, 1, cfg.hidden_dim, values, vec![TokenRole::Assistant])
    };

    let pos = (0..cfg.samples_per_pole).map(|_| make(true)).collect::<Result<Vec<_>>>()?;
    let neg = (0..cfg.samples_per_pole).map(|_| make(false)).collect::<Result<Vec<_>>>()?;
    Ok((pos, neg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selfreport::{expected_rating, DigitLogits};
    use proptest::prelude::*;

    fn small_tensor() -> ActivationTensor<f64> {
        let values = (0..24).map(|i| i as f64 * 0.25 - 2.0).collect();
        ActivationTensor::new(2, 3, 4, values, vec![TokenRole::User, TokenRole::Assistant, TokenRole::Assistant])
            .unwrap()
            .with_meta("model", "toy")
    }

    #[test]
    fn dump_round_trip_2x3x4() {
        let dir = tempfile::tempdir().unwrap();
        let t = small_tensor();
        save_dump(&t, dir.path()).unwrap();
        let back: ActivationTensor<f64> = load_dump(dir.path()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn manifest_layer_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_dump(&small_tensor(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        m["layer_count"] = 3.into();
        fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
        let err = load_dump::<f64>(dir.path()).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)), "{err}");
    }

    #[test]
    fn unknown_format_version() {
        let dir = tempfile::tempdir().unwrap();
        save_dump(&small_tensor(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        m["format_version"] = 7.into();
        fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(load_dump::<f64>(dir.path()), Err(Error::UnsupportedFormatVersion(7))));
    }

    #[test]
    fn non_finite_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dump(&small_tensor(), dir.path()).unwrap();
        let path = dir.path().join(VALUES_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[0..4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_dump::<f64>(dir.path()), Err(Error::NonFinite(_))));
        assert!(ActivationTensor::<f64>::new(1, 1, 2, vec![0.0, f64::INFINITY], vec![TokenRole::User]).is_err());
    }

    #[test]
    fn last_span_filter() {
        use TokenRole::*;
        let roles = [System, User, Assistant, Assistant, User, Assistant, Assistant, Assistant];
        assert_eq!(RoleFilter::LastSpan(Assistant).select(&roles), vec![5, 6, 7]);
        assert_eq!(RoleFilter::Only(User).select(&roles), vec![1, 4]);
        assert_eq!(RoleFilter::AllExcept(System).select(&roles).len(), 7);
        assert!(RoleFilter::LastSpan(RatingQuery).select(&roles).is_empty());
    }

    fn conv(id: &str, turns: usize) -> Conversation {
        Conversation {
            id: id.into(),
            topic: "Sleep hygiene".into(),
            turns: (0..turns)
                .map(|i| Turn { user: format!("question {i}"), assistant: format!("answer {i}") })
                .collect(),
            gen_params: BTreeMap::new(),
        }
    }

    #[test]
    fn conversations_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        fs::write(&p, "").unwrap();
        assert!(read_conversations(&p).unwrap().is_empty());
    }

    #[test]
    fn conversations_round_trip_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let cs = vec![conv("a", 2), conv("b", 3)];
        write_conversations(&cs, &p).unwrap();
        assert_eq!(read_conversations(&p).unwrap(), cs);
        let dup = vec![conv("a", 1), conv("a", 1)];
        assert!(matches!(write_conversations(&dup, &p), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn missing_assistant_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let good = serde_json::to_string(&conv("a", 1)).unwrap();
        let bad = r#"{"id":"b","topic":"t","turns":[{"user":"hi"}]}"#;
        fs::write(&p, format!("{good}\n{bad}\n")).unwrap();
        match read_conversations(&p) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn observation_uniqueness_enforced() {
        let report = expected_rating(&DigitLogits::new([0.0; 10]).unwrap());
        let o = Observation {
            conversation_id: "c".into(),
            turn: 1,
            concept: "interest".into(),
            steer_concept: None,
            alpha: 0.0,
            probe_score_prev: 0.1,
            report,
            seed: 1,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.jsonl");
        assert!(write_observations(&[o.clone(), o.clone()], &p).is_err());
        let mut o2 = o.clone();
        o2.alpha = 2.0;
        write_observations(&[o.clone(), o2.clone()], &p).unwrap();
        assert_eq!(read_observations(&p).unwrap(), vec![o, o2]);
    }

    #[test]
    fn fixture_zero_noise_exact_separation() {
        let cfg = PlantedFixture::with_random_direction(3, 6, 16, 4, 2, 4.0, 0.0);
        let (pos, neg) = make_planted_fixture::<f64>(&cfg).unwrap();
        for layer in 0..6 {
            for d in 0..16 {
                let p = pos.iter().map(|t| t.hidden(layer, 0)[d]).sum::<f64>() / 4.0;
                let n = neg.iter().map(|t| t.hidden(layer, 0)[d]).sum::<f64>() / 4.0;
                let want = if layer == 2 { 4.0 * cfg.planted_direction[d] } else { 0.0 };
                assert!((p - n - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fixture_deterministic_and_validated() {
        let cfg = PlantedFixture::with_random_direction(11, 6, 8, 3, 3, 4.0, 1.0);
        let a = make_planted_fixture::<f64>(&cfg).unwrap();
        let b = make_planted_fixture::<f64>(&cfg).unwrap();
        assert_eq!(a, b);

        let mut bad = cfg.clone();
        bad.planted_layer = 6;
        assert!(make_planted_fixture::<f64>(&bad).is_err());
        let tiny = PlantedFixture::with_random_direction(1, 6, 1, 3, 3, 4.0, 1.0);
        assert!(make_planted_fixture::<f64>(&tiny).is_err());
    }

    proptest! {
        #[test]
        fn dump_round_trip_identity(
            layers in 1usize..4,
            tokens in 1usize..5,
            dim in 1usize..6,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = layers * tokens * dim;
            let values: Vec<f64> = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * 100.0) as f32 as f64
                })
                .collect();
            let roles = (0..tokens)
                .map(|i| if i % 2 == 0 { TokenRole::User } else { TokenRole::Assistant })
                .collect();
            let t = ActivationTensor::new(layers, tokens, dim, values, roles).unwrap();
            let dir = tempfile::tempdir().unwrap();
            save_dump(&t, dir.path()).unwrap();
            let back: ActivationTensor<f64> = load_dump(dir.path()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
