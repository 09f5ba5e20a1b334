//! Model assembly: configuration, the full goal/current -> logits forward
//! pass, and the shape audit used by the `shapes` subcommand.

use rand_chacha::ChaCha8Rng;

use crate::decoder::{binarize, Decoder};
use crate::encoder::SerialEncoder;
use crate::error::{Error, Result};
use crate::fusion::{z_channels, Ablation, CrossEncoder};
use crate::param::{join, ParamVisit};
use crate::scalar::Scalar;
use crate::tensor::{NoGradGuard, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Input image side; images are [3, S, S].
    pub s: usize,
    /// Per-stage channel widths C_1..C_M.
    pub channels: Vec<usize>,
    pub serial_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ablation: Ablation,
    /// Siamese weight sharing between the goal and current lanes.
    pub share_lane_weights: bool,
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            s: 256,
            channels: vec![64, 128, 320, 512],
            serial_layers: 2,
            decoder_layers: 1,
            heads: 8,
            ablation: Ablation::Full,
            share_lane_weights: false,
        }
    }

    pub fn desk() -> Self {
        Self {
            s: 64,
            channels: vec![16, 32, 64, 96],
            serial_layers: 1,
            decoder_layers: 1,
            heads: 4,
            ablation: Ablation::Full,
            share_lane_weights: true,
        }
    }

    /// Two-stage 8x8 configuration, small enough for 64-bit finite
    /// differences over the whole model.
    pub fn check8() -> Self {
        Self {
            s: 8,
            channels: vec![16, 32],
            serial_layers: 2,
            decoder_layers: 1,
            heads: 8,
            ablation: Ablation::Full,
            share_lane_weights: true,
        }
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.stages();
        if m < 2 {
            return Err(Error::Config("need at least two stages".into()));
        }
        if self.serial_layers < 1 || self.decoder_layers < 1 || self.heads < 1 {
            return Err(Error::Config("layer and head counts must be >= 1".into()));
        }
        let stride_total = 4usize << (m - 1);
        if self.s == 0 || self.s % stride_total != 0 {
            return Err(Error::Config(format!(
                "image side {} not divisible by total stride {stride_total}",
                self.s
            )));
        }
        for (i, &c) in self.channels.iter().enumerate() {
            if c == 0 || c % self.heads != 0 {
                return Err(Error::Config(format!(
                    "stage {} width {c} not divisible by {} heads",
                    i + 1,
                    self.heads
                )));
            }
        }
        if (self.channels[0] / 2) % self.heads != 0 {
            return Err(Error::Config(format!(
                "half of stage-1 width {} must stay divisible by {} heads",
                self.channels[0], self.heads
            )));
        }
        Ok(())
    }

    /// Stage schedule (H_i, W_i, C_i): stride 4 into stage 1, then 2 per stage.
    pub fn schedule(&self) -> Vec<(usize, usize, usize)> {
        let h1 = self.s / 4;
        self.channels
            .iter()
            .enumerate()
            .map(|(i, &c)| (h1 >> i, h1 >> i, c))
            .collect()
    }

    pub fn z_channels(&self) -> Vec<usize> {
        z_channels(&self.channels, self.ablation)
    }

    pub fn to_kv(&self) -> String {
        let chans: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        format!(
            "s={}\nchannels={}\nserial_layers={}\ndecoder_layers={}\nheads={}\nablation={}\nshare_lanes={}\n",
            self.s,
            chans.join(","),
            self.serial_layers,
            self.decoder_layers,
            self.heads,
            self.ablation.label(),
            self.share_lane_weights
        )
    }

    /// Parses `key=value` lines, ignoring keys it does not own.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut s = None;
        let mut channels = None;
        let mut serial_layers = None;
        let mut decoder_layers = None;
        let mut heads = None;
        let mut ablation = None;
        let mut share = None;
        let bad = |k: &str, v: &str| Error::Config(format!("bad config entry {k}={v}"));
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed config line: {line}")))?;
            match k {
                "s" => s = Some(v.parse().map_err(|_| bad(k, v))?),
                "channels" => {
                    let parsed: std::result::Result<Vec<usize>, _> =
                        v.split(',').map(str::parse).collect();
                    channels = Some(parsed.map_err(|_| bad(k, v))?);
                }
                "serial_layers" => serial_layers = Some(v.parse().map_err(|_| bad(k, v))?),
                "decoder_layers" => decoder_layers = Some(v.parse().map_err(|_| bad(k, v))?),
                "heads" => heads = Some(v.parse().map_err(|_| bad(k, v))?),
                "ablation" => ablation = Some(Ablation::from_label(v)?),
                "share_lanes" => share = Some(v.parse().map_err(|_| bad(k, v))?),
                _ => {}
            }
        }
        let missing = |k: &str| Error::Config(format!("config missing key {k}"));
        let cfg = Self {
            s: s.ok_or_else(|| missing("s"))?,
            channels: channels.ok_or_else(|| missing("channels"))?,
            serial_layers: serial_layers.ok_or_else(|| missing("serial_layers"))?,
            decoder_layers: decoder_layers.ok_or_else(|| missing("decoder_layers"))?,
            heads: heads.ok_or_else(|| missing("heads"))?,
            ablation: ablation.ok_or_else(|| missing("ablation"))?,
            share_lane_weights: share.ok_or_else(|| missing("share_lanes"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub struct RtdModel<E: Scalar> {
    pub config: ModelConfig,
    pub serial: SerialEncoder<E>,
    pub fusion: CrossEncoder<E>,
    pub decoder: Decoder<E>,
}

impl<E: Scalar> RtdModel<E> {
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let serial = SerialEncoder::new(
            &config.channels,
            config.serial_layers,
            config.heads,
            config.share_lane_weights,
            rng,
        )?;
        let fusion = CrossEncoder::new(&config.channels, config.heads, config.ablation, rng)?;
        let decoder = Decoder::new(
            &config.schedule(),
            &config.z_channels(),
            config.heads,
            config.decoder_layers,
            rng,
        )?;
        Ok(Self { config, serial, fusion, decoder })
    }

    fn check_input(&self, t: &Tensor<E>, what: &str) -> Result<()> {
        let want = [3, self.config.s, self.config.s];
        if t.shape() != want {
            return Err(Error::BadShape {
                op: "model forward",
                shape: t.shape().to_vec(),
                why: format!("{what} must be {want:?}"),
            });
        }
        Ok(())
    }

    /// goal/current RGB images [3, S, S] -> change logits [2, S, S].
    pub fn forward(&self, goal: &Tensor<E>, cur: &Tensor<E>) -> Result<Tensor<E>> {
        let mut sink = Vec::new();
        self.forward_traced(goal, cur, &mut sink)
    }

    pub fn forward_traced(
        &self,
        goal: &Tensor<E>,
        cur: &Tensor<E>,
        trace: &mut Vec<(String, Vec<usize>)>,
    ) -> Result<Tensor<E>> {
        self.check_input(goal, "goal image")?;
        self.check_input(cur, "current image")?;
        let (h_goal, h_cur) = self.serial.encode_two_lanes(goal, cur)?;
        for (i, h) in h_goal.iter().enumerate() {
            trace.push((format!("h_goal{}", i + 1), h.shape().to_vec()));
        }
        for (i, h) in h_cur.iter().enumerate() {
            trace.push((format!("h_cur{}", i + 1), h.shape().to_vec()));
        }
        let (zs, z_down_m) = self.fusion.fuse(&h_goal, &h_cur)?;
        for (i, z) in zs.iter().enumerate() {
            trace.push((format!("z{}", i + 1), z.shape().to_vec()));
        }
        trace.push((format!("z_down{}", zs.len()), z_down_m.shape().to_vec()));
        self.decoder.decode_traced(&zs, &z_down_m, trace)
    }

    /// Inference-mode mask prediction: no graph, argmax over logits.
    pub fn predict_mask(&self, goal: &Tensor<E>, cur: &Tensor<E>) -> Result<Vec<u8>> {
        let _guard = NoGradGuard::new();
        binarize(&self.forward(goal, cur)?)
    }
}

impl<E: Scalar> ParamVisit<E> for RtdModel<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.serial.visit(&join(prefix, "serial"), f);
        self.fusion.visit(&join(prefix, "fusion"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.serial.visit_mut(&join(prefix, "serial"), f);
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

/// A full-forward shape audit. Runs the real model on a deterministic input
/// under no-grad and compares every recorded shape to the symbolic schedule.
pub struct ShapeAudit {
    pub trace: Vec<(String, Vec<usize>)>,
    pub mismatches: Vec<String>,
}

pub fn audit_shapes(config: &ModelConfig, seed: u64) -> Result<ShapeAudit> {
    use rand::{Rng, SeedableRng};
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = RtdModel::<f32>::new(config.clone(), &mut rng)?;
    let n = 3 * config.s * config.s;
    let mk = |rng: &mut ChaCha8Rng| {
        let data = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(&[3, config.s, config.s], data)
    };
    let goal = mk(&mut rng)?;
    let cur = mk(&mut rng)?;
    let mut trace = Vec::new();
    let logits = {
        let _guard = NoGradGuard::new();
        model.forward_traced(&goal, &cur, &mut trace)?
    };

    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    let sched = config.schedule();
    let zc = config.z_channels();
    let m = sched.len();
    for (i, &(h, w, c)) in sched.iter().enumerate() {
        expected.push((format!("h_goal{}", i + 1), vec![c, h, w]));
    }
    for (i, &(h, w, c)) in sched.iter().enumerate() {
        expected.push((format!("h_cur{}", i + 1), vec![c, h, w]));
    }
    for (i, &(h, w, _)) in sched.iter().enumerate() {
        expected.push((format!("z{}", i + 1), vec![zc[i], h, w]));
    }
    expected.push((format!("z_down{m}"), vec![sched[m - 1].2, sched[m - 1].0, sched[m - 1].1]));
    for i in (2..=m).rev() {
        let (h, w, c) = sched[i - 2];
        expected.push((format!("u{i}"), vec![c, h, w]));
    }
    expected.push(("u1".into(), vec![config.channels[0] / 2, config.s, config.s]));
    expected.push(("logits".into(), vec![2, config.s, config.s]));

    let mut mismatches = Vec::new();
    if trace.len() != expected.len() {
        mismatches.push(format!(
            "trace has {} entries, schedule expects {}",
            trace.len(),
            expected.len()
        ));
    }
    for (got, want) in trace.iter().zip(expected.iter()) {
        if got != want {
            mismatches.push(format!(
                "{}: got {:?}, schedule says {} {:?}",
                got.0, got.1, want.0, want.1
            ));
        }
    }
    if logits.shape() != [2, config.s, config.s] {
        mismatches.push(format!("final logits shape {:?}", logits.shape()));
    }
    Ok(ShapeAudit { trace, mismatches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::count_params;
    use rand::SeedableRng;

    #[test]
    fn config_kv_round_trip() {
        for cfg in [ModelConfig::paper(), ModelConfig::desk(), ModelConfig::check8()] {
            let back = ModelConfig::from_kv(&cfg.to_kv()).unwrap();
            assert_eq!(back, cfg);
        }
        let mut ab = ModelConfig::desk();
        ab.ablation = Ablation::CrossThenSelf;
        ab.share_lane_weights = false;
        assert_eq!(ModelConfig::from_kv(&ab.to_kv()).unwrap(), ab);
    }

    #[test]
    fn config_rejects_bad_geometry() {
        let mut cfg = ModelConfig::desk();
        cfg.s = 60;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk();
        cfg.channels = vec![12, 32, 80, 128];
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk();
        cfg.channels = vec![16];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn schedule_matches_stated_pyramids() {
        assert_eq!(
            ModelConfig::paper().schedule(),
            vec![(64, 64, 64), (32, 32, 128), (16, 16, 320), (8, 8, 512)]
        );
        assert_eq!(
            ModelConfig::desk().schedule(),
            vec![(16, 16, 16), (8, 8, 32), (4, 4, 64), (2, 2, 96)]
        );
        assert_eq!(ModelConfig::check8().schedule(), vec![(2, 2, 16), (1, 1, 32)]);
    }

    #[test]
    fn desk_forward_produces_logits_and_mask() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = RtdModel::<f32>::new(ModelConfig::desk(), &mut rng).unwrap();
        let mk = |rng: &mut ChaCha8Rng| {
            let data = (0..3 * 64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
            Tensor::from_vec(&[3, 64, 64], data).unwrap()
        };
        let goal = mk(&mut rng);
        let cur = mk(&mut rng);
        let logits = model.forward(&goal, &cur).unwrap();
        assert_eq!(logits.shape(), &[2, 64, 64]);
        assert!(logits.data().iter().all(|v| v.is_finite()));
        let mask = model.predict_mask(&goal, &cur).unwrap();
        assert_eq!(mask.len(), 64 * 64);
        assert!(mask.iter().all(|&b| b <= 1));
    }

    #[test]
    fn desk_shape_audit_is_clean() {
        let audit = audit_shapes(&ModelConfig::desk(), 3).unwrap();
        assert!(audit.mismatches.is_empty(), "{:?}", audit.mismatches);
        assert_eq!(audit.trace.last().unwrap().1, vec![2, 64, 64]);
    }

    #[test]
    fn check8_shape_audit_is_clean() {
        let audit = audit_shapes(&ModelConfig::check8(), 3).unwrap();
        assert!(audit.mismatches.is_empty(), "{:?}", audit.mismatches);
    }

    #[test]
    fn parameter_names_are_unique_and_orders_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = RtdModel::<f32>::new(ModelConfig::check8(), &mut rng).unwrap();
        let mut names = Vec::new();
        model.visit("", &mut |n, _| names.push(n.to_string()));
        let mut mut_names = Vec::new();
        model.visit_mut("", &mut |n, _| mut_names.push(n.to_string()));
        assert_eq!(names, mut_names);
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len(), "duplicate parameter names");
    }

    #[test]
    fn desk_parameter_count_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = RtdModel::<f32>::new(ModelConfig::desk(), &mut rng).unwrap();
        let n = count_params(&model);
        assert_eq!(n, 397_600, "desk parameter count drifted");
    }

    #[test]
    fn paper_parameter_count_sits_in_stated_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = RtdModel::<f32>::new(ModelConfig::paper(), &mut rng).unwrap();
        let n = count_params(&model);
        assert_eq!(n, 24_468_928, "paper parameter count drifted");
        assert!((20_000_000..=30_000_000).contains(&n));
    }
}
