//! Bit-flip faults in stored parameter words.
//!
//! A fault campaign ([`FaultSpec`]) flips every in-scope parameter bit
//! independently with probability `rate`. Realisations ([`FaultMask`]) are
//! drawn from ChaCha8 used as a counter-based generator: the key is derived
//! from `(seed, trial_id)`, the stream is the layer index, and parameter word
//! `w` owns keystream block `w`. A word's bits therefore depend only on
//! `(seed, trial_id, layer, word)`, never on evaluation order or threads.
//!
//! Within a word the flipped bit positions are produced by geometric gap
//! sampling: with `q = 1 − rate`, the gap before the next flip is
//! `⌊ln U / ln q⌋`. The first draw lands past bit 31 with probability exactly
//! `q^32`, so a clean word costs one uniform draw.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{decode_word_f32, WORD_BITS};
use crate::model::{Model, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultScope {
    /// Parameters of one conv/fc layer (model layer index).
    Layer(usize),
    /// Every conv/fc layer.
    Network,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    /// Per-bit flip probability.
    pub rate: f64,
    pub scope: FaultScope,
    pub seed: u64,
    pub trial_id: u64,
    /// Biases share parameter memory with weights and are in scope unless
    /// this is cleared.
    pub include_biases: bool,
}

impl FaultSpec {
    pub fn new(rate: f64, scope: FaultScope, seed: u64, trial_id: u64) -> Self {
        Self {
            rate,
            scope,
            seed,
            trial_id,
            include_biases: true,
        }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Config(format!("fault rate {} outside [0, 1]", self.rate)));
        }
        if let FaultScope::Layer(l) = self.scope {
            if model.params().get(l).is_none_or(Option::is_none) {
                return Err(Error::Config(format!(
                    "fault scope layer {l} is not a conv/fc layer of this model"
                )));
            }
        }
        Ok(())
    }

    /// Layers whose words are in scope.
    pub fn target_layers(&self, model: &Model) -> Vec<usize> {
        match self.scope {
            FaultScope::Layer(l) => vec![l],
            FaultScope::Network => model.param_layers(),
        }
    }

    /// Number of in-scope bits.
    pub fn bit_count(&self, model: &Model) -> u64 {
        self.target_layers(model)
            .iter()
            .map(|&l| {
                let p = model.params()[l].as_ref().expect("param layer");
                let words = if self.include_biases { p.word_count() } else { p.weight.len() };
                words as u64 * WORD_BITS as u64
            })
            .sum()
    }
}

/// One flipped bit: `word` indexes the layer's weight words, then its bias
/// words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BitFlip {
    pub layer: usize,
    pub word: usize,
    pub bit: u8,
}

/// A realised set of bit flips, sorted and duplicate-free.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultMask {
    flips: Vec<BitFlip>,
}

impl FaultMask {
    pub fn new(mut flips: Vec<BitFlip>) -> Result<Self> {
        flips.sort_unstable();
        if let Some(f) = flips.iter().find(|f| u32::from(f.bit) >= WORD_BITS) {
            return Err(Error::MaskIndex(format!("bit {} >= {WORD_BITS}", f.bit)));
        }
        if let Some(w) = flips.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::MaskIndex(format!("duplicate flip {:?}", w[0])));
        }
        Ok(Self { flips })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn flips(&self) -> &[BitFlip] {
        &self.flips
    }

    pub fn len(&self) -> usize {
        self.flips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flips.is_empty()
    }

    /// Lowest layer index touched, if any.
    pub fn first_layer(&self) -> Option<usize> {
        self.flips.first().map(|f| f.layer)
    }

    /// Combined XOR pattern per `(layer, word)`.
    pub fn xor_patterns(&self) -> BTreeMap<(usize, usize), u32> {
        let mut out = BTreeMap::new();
        for f in &self.flips {
            *out.entry((f.layer, f.word)).or_insert(0u32) ^= 1 << f.bit;
        }
        out
    }

    fn check_against(&self, model: &Model) -> Result<()> {
        for f in &self.flips {
            let p = model.params().get(f.layer).and_then(Option::as_ref).ok_or_else(|| {
                Error::MaskIndex(format!("layer {} has no parameters", f.layer))
            })?;
            if f.word >= p.word_count() {
                return Err(Error::MaskIndex(format!(
                    "word {} of layer {} (has {} words)",
                    f.word,
                    f.layer,
                    p.word_count()
                )));
            }
        }
        Ok(())
    }

    /// Decoded network for `model` with this mask applied, built by patching
    /// only the affected entries of `base` (which must be `model.decode()`).
    pub fn patch(&self, model: &Model, base: &Network) -> Result<Network> {
        self.check_against(model)?;
        let mut net = base.clone();
        for ((layer, word), xor) in self.xor_patterns() {
            let p = model.params()[layer].as_ref().expect("checked");
            let value = decode_word_f32(p.word(word).expect("checked") ^ xor, model.format);
            let (w, b) = net.params[layer].as_mut().expect("decoded params mirror model");
            let nw = w.len();
            if word < nw {
                w.data_mut()[word] = value;
            } else {
                b.data_mut()[word - nw] = value;
            }
        }
        Ok(net)
    }

    /// One JSON object per line: `{"layer":L,"word":W,"bit":B}`.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for f in &self.flips {
            s.push_str(&serde_json::to_string(f).expect("plain struct"));
            s.push('\n');
        }
        s
    }

    /// Parses [`FaultMask::to_jsonl`] output. Blank lines and objects with a
    /// `"header"` key are skipped.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut flips = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line)?;
            if v.get("header").is_some() {
                continue;
            }
            flips.push(serde_json::from_value(v)?);
        }
        Self::new(flips)
    }
}

/// Draws the fault realisation for `spec`.
pub fn draw_mask(model: &Model, spec: &FaultSpec) -> Result<FaultMask> {
    spec.validate(model)?;
    let mut flips = Vec::new();
    if spec.rate == 0.0 {
        return Ok(FaultMask::empty());
    }
    let sampler = BitSampler::new(spec.rate);
    let mut bits = Vec::with_capacity(WORD_BITS as usize);
    for layer in spec.target_layers(model) {
        let p = model.params()[layer].as_ref().expect("validated");
        let words = if spec.include_biases { p.word_count() } else { p.weight.len() };
        let mut stream = KeyedStream::new(spec.seed, spec.trial_id, layer);
        for word in 0..words {
            let mut draws = stream.word_draws(word);
            bits.clear();
            sampler.sample(&mut draws, &mut bits);
            flips.extend(bits.iter().map(|&bit| BitFlip { layer, word, bit }));
        }
    }
    // Generated in (layer, word, bit) order already.
    Ok(FaultMask { flips })
}

/// Returns a copy of `model` whose targeted words have the listed bits
/// XOR-flipped. Applying the same mask twice restores the original words.
pub fn apply_mask(model: &Model, mask: &FaultMask) -> Result<Model> {
    mask.check_against(model)?;
    let mut out = model.clone();
    for ((layer, word), xor) in mask.xor_patterns() {
        let p = out.params_mut()[layer].as_mut().expect("checked");
        *p.word_mut(word).expect("checked") ^= xor;
    }
    Ok(out)
}

/// Per-word flip positions by geometric gap sampling.
#[derive(Debug, Clone, Copy)]
struct BitSampler {
    rate: f64,
    /// `ln(1 − rate)`, negative.
    ln_keep: f64,
}

impl BitSampler {
    fn new(rate: f64) -> Self {
        Self {
            rate,
            ln_keep: (-rate).ln_1p(),
        }
    }

    fn sample(&self, draws: &mut WordDraws<'_>, out: &mut Vec<u8>) {
        if self.rate >= 1.0 {
            out.extend(0..WORD_BITS as u8);
            return;
        }
        let mut next = 0u32;
        loop {
            let gap = (draws.uniform().ln() / self.ln_keep).floor();
            if gap >= (WORD_BITS - next) as f64 {
                return;
            }
            let bit = next + gap as u32;
            out.push(bit as u8);
            next = bit + 1;
            if next >= WORD_BITS {
                return;
            }
        }
    }
}

const BLOCK_U64: usize = 8;

/// Keystream for one `(seed, trial, layer)`: word `w` owns 64-byte block `w`.
struct KeyedStream {
    rng: ChaCha8Rng,
    key: [u8; 32],
    layer: usize,
    next_word: usize,
}

impl KeyedStream {
    fn new(seed: u64, trial_id: u64, layer: usize) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&trial_id.to_le_bytes());
        key[16..24].copy_from_slice(b"bitflips");
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(layer as u64);
        Self {
            rng,
            key,
            layer,
            next_word: 0,
        }
    }

    fn word_draws(&mut self, word: usize) -> WordDraws<'_> {
        if word != self.next_word {
            self.rng.set_word_pos(word as u128 * 2 * BLOCK_U64 as u128);
        }
        let mut block = [0u64; BLOCK_U64];
        self.rng.fill(&mut block[..]);
        self.next_word = word + 1;
        WordDraws {
            block,
            used: 0,
            overflow: None,
            key: &self.key,
            layer: self.layer,
            word,
        }
    }
}

/// Uniform draws for one word: its keystream block first, then (rarely, at
/// high rates) a private overflow stream keyed on the word.
struct WordDraws<'a> {
    block: [u64; BLOCK_U64],
    used: usize,
    overflow: Option<ChaCha8Rng>,
    key: &'a [u8; 32],
    layer: usize,
    word: usize,
}

impl WordDraws<'_> {
    fn next_u64(&mut self) -> u64 {
        if self.used < BLOCK_U64 {
            self.used += 1;
            return self.block[self.used - 1];
        }
        let (key, layer, word) = (self.key, self.layer, self.word);
        self.overflow
            .get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::from_seed(*key);
                rng.set_stream(1 << 63 | (layer as u64) << 32 | word as u64);
                rng
            })
            .next_u64()
    }

    /// Uniform on `(0, 1]`.
    fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::{encode_word, NumericFormat};
    use crate::model::{LayerKind, LayerParams, LayerSpec, WordTensor};
    use crate::tensor::Tensor;

    /// flatten → fc(4→3) → relu → fc(3→2) → relu, with 1.0 everywhere.
    pub(crate) fn two_fc() -> Model {
        let one = encode_word(1.0, NumericFormat::Float32).word;
        let wt = |shape: Vec<usize>| {
            let n = shape.iter().product();
            WordTensor { shape, words: vec![one; n] }
        };
        Model::new(
            "two-fc",
            vec![1, 2, 2],
            2,
            NumericFormat::Float32,
            vec![
                LayerSpec::new("flat", LayerKind::Flatten),
                LayerSpec::new("fc1", LayerKind::FullyConnected { in_features: 4, out_features: 3 }),
                LayerSpec::new("act1", LayerKind::Relu),
                LayerSpec::new("fc2", LayerKind::FullyConnected { in_features: 3, out_features: 2 }),
                LayerSpec::new("act2", LayerKind::Relu),
            ],
            vec![
                None,
                Some(LayerParams { weight: wt(vec![3, 4]), bias: wt(vec![3]) }),
                None,
                Some(LayerParams { weight: wt(vec![2, 3]), bias: wt(vec![2]) }),
                None,
            ],
        )
        .unwrap()
    }

    #[test]
    fn rate_zero_is_empty() {
        let m = two_fc();
        let mask = draw_mask(&m, &FaultSpec::new(0.0, FaultScope::Network, 1, 0)).unwrap();
        assert!(mask.is_empty());
    }

    #[test]
    fn rate_one_flips_every_bit_once() {
        let m = two_fc();
        let spec = FaultSpec::new(1.0, FaultScope::Network, 1, 0);
        let mask = draw_mask(&m, &spec).unwrap();
        assert_eq!(mask.len() as u64, spec.bit_count(&m));
        assert_eq!(mask.len(), (15 + 8) * 32);
        assert!(FaultMask::new(mask.flips().to_vec()).is_ok());
    }

    #[test]
    fn layer_scope_and_bias_exclusion() {
        let m = two_fc();
        let mut spec = FaultSpec::new(1.0, FaultScope::Layer(3), 9, 2);
        let mask = draw_mask(&m, &spec).unwrap();
        assert!(mask.flips().iter().all(|f| f.layer == 3));
        assert_eq!(mask.len(), 8 * 32);
        spec.include_biases = false;
        let mask = draw_mask(&m, &spec).unwrap();
        assert_eq!(mask.len(), 6 * 32);
        assert!(mask.flips().iter().all(|f| f.word < 6));
    }

    #[test]
    fn invalid_specs() {
        let m = two_fc();
        assert!(draw_mask(&m, &FaultSpec::new(1.5, FaultScope::Network, 0, 0)).is_err());
        assert!(draw_mask(&m, &FaultSpec::new(0.1, FaultScope::Layer(2), 0, 0)).is_err());
        assert!(draw_mask(&m, &FaultSpec::new(0.1, FaultScope::Layer(99), 0, 0)).is_err());
    }

    #[test]
    fn same_spec_same_mask_different_trial_differs() {
        let m = two_fc();
        let a = draw_mask(&m, &FaultSpec::new(0.2, FaultScope::Network, 5, 1)).unwrap();
        let b = draw_mask(&m, &FaultSpec::new(0.2, FaultScope::Network, 5, 1)).unwrap();
        let c = draw_mask(&m, &FaultSpec::new(0.2, FaultScope::Network, 5, 2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn layer_draws_do_not_depend_on_scope() {
        // The layer-3 realisation is the same whether drawn alone or as part
        // of a network-wide campaign.
        let m = two_fc();
        let net = draw_mask(&m, &FaultSpec::new(0.3, FaultScope::Network, 11, 4)).unwrap();
        let one = draw_mask(&m, &FaultSpec::new(0.3, FaultScope::Layer(3), 11, 4)).unwrap();
        let from_net: Vec<_> = net.flips().iter().filter(|f| f.layer == 3).copied().collect();
        assert_eq!(from_net, one.flips());
    }

    #[test]
    fn high_rate_uses_overflow_stream() {
        let m = two_fc();
        let spec = FaultSpec::new(0.9, FaultScope::Network, 3, 0);
        let mask = draw_mask(&m, &spec).unwrap();
        let n = spec.bit_count(&m) as f64;
        let got = mask.len() as f64;
        let sd = (n * 0.9 * 0.1).sqrt();
        assert!((got - 0.9 * n).abs() < 5.0 * sd, "{got} vs {}", 0.9 * n);
    }

    #[test]
    fn apply_mask_sign_bit_and_involution() {
        let m = two_fc();
        let mask = FaultMask::new(vec![BitFlip { layer: 1, word: 0, bit: 31 }]).unwrap();
        let faulty = apply_mask(&m, &mask).unwrap();
        let w = faulty.params()[1].as_ref().unwrap().weight.words[0];
        assert_eq!(f32::from_bits(w), -1.0);
        assert_eq!(apply_mask(&faulty, &mask).unwrap(), m);
        assert_eq!(m.params()[1].as_ref().unwrap().weight.words[0], 0x3F80_0000);
    }

    #[test]
    fn exponent_msb_flip_makes_infinity() {
        let m = two_fc();
        let mask = FaultMask::new(vec![BitFlip { layer: 1, word: 0, bit: 30 }]).unwrap();
        let faulty = apply_mask(&m, &mask).unwrap();
        assert_eq!(faulty.params()[1].as_ref().unwrap().weight.words[0], 0x7F80_0000);
        let x = Tensor::new(vec![1, 2, 2], vec![1.0; 4]).unwrap();
        let hidden = faulty.decode().forward_trace(&x).unwrap();
        assert_eq!(hidden[2].data()[0], f32::INFINITY);
        // The clean network keeps that activation at 5.
        assert_eq!(m.decode().forward_trace(&x).unwrap()[2].data()[0], 5.0);
    }

    #[test]
    fn empty_mask_is_identity() {
        let m = two_fc();
        assert_eq!(apply_mask(&m, &FaultMask::empty()).unwrap(), m);
    }

    #[test]
    fn out_of_range_mask() {
        let m = two_fc();
        let bad_word = FaultMask::new(vec![BitFlip { layer: 1, word: 15, bit: 0 }]).unwrap();
        assert!(matches!(apply_mask(&m, &bad_word), Err(Error::MaskIndex(_))));
        let bad_layer = FaultMask::new(vec![BitFlip { layer: 0, word: 0, bit: 0 }]).unwrap();
        assert!(apply_mask(&m, &bad_layer).is_err());
        assert!(FaultMask::new(vec![BitFlip { layer: 1, word: 0, bit: 32 }]).is_err());
        let dup = BitFlip { layer: 1, word: 0, bit: 3 };
        assert!(FaultMask::new(vec![dup, dup]).is_err());
    }

    #[test]
    fn patch_matches_apply_then_decode() {
        let m = two_fc();
        let mask = draw_mask(&m, &FaultSpec::new(0.05, FaultScope::Network, 21, 0)).unwrap();
        assert!(!mask.is_empty());
        let patched = mask.patch(&m, &m.decode()).unwrap();
        let full = apply_mask(&m, &mask).unwrap().decode();
        for l in m.param_layers() {
            let (pw, pb) = patched.layer_params(l).unwrap();
            let (fw, fb) = full.layer_params(l).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(pw), bits(fw));
            assert_eq!(bits(pb), bits(fb));
        }
    }

    #[test]
    fn jsonl_roundtrip_with_header() {
        let m = two_fc();
        let mask = draw_mask(&m, &FaultSpec::new(0.05, FaultScope::Network, 2, 0)).unwrap();
        let text = format!("{{\"header\":{{\"seed\":2}}}}\n{}", mask.to_jsonl());
        assert_eq!(FaultMask::from_jsonl(&text).unwrap(), mask);
        assert!(FaultMask::from_jsonl("{\"layer\":1}").is_err());
    }
}
