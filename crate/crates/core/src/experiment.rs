//! Experiment lifecycle: world and corpus generation, pairing, rendering, supervised and
//! RL training, the rule baseline, evaluation and reporting. Every stage reads its inputs
//! from and writes its outputs to one run directory, and records itself in an
//! append-only `manifest.txt`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{rule_sig, RuleSigParams};
use crate::error::{Error, Result};
use crate::gdpo::{mean_rollout_reward, train_rl, training_log_csv, RewardContext, TrainConfig};
use crate::policy::{sample_rollout, sft_batch_step, sft_example, sft_loss, DecodeMode, DrawCondition, DrawPolicy, PolicyConfig, Sgd};
use crate::render::{frame_endpoints, ppm, render_condition, render_target_video, write_video, RenderStyle};
use crate::rewards::{audit_csv, AuditRow, RewardConfig, RewardMode, RewardTarget};
use crate::rng;
use crate::roadnet::{generate_network, rasterize_map, MapStyle, NetworkParams, RoadNetwork, Viewport};
use crate::simdata::{
    match_pairs, place_towers, simulate_gps, simulate_signaling, DriveParams, GpsTrajectory, PairCriteria, SignalParams,
    SignalSequence, TowerSet,
};
use crate::world::{eval_metrics, point_errors, MetricsReport, WorldPoint};

const TAG_WORLD: u64 = 1;
const TAG_TOWERS: u64 = 2;
const TAG_TRIP: u64 = 3;
const TAG_SPLIT: u64 = 4;
const TAG_SFT: u64 = 5;
const TAG_RL: u64 = 6;
const TAG_EVAL: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub network: NetworkParams,
    pub towers: usize,
    pub tower_min_separation: f64,
    pub signal: SignalParams,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            network: NetworkParams::default(),
            towers: 150,
            tower_min_separation: 300.0,
            signal: SignalParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Simulated trips in the GPS pool.
    pub trips: usize,
    /// Pairs kept after matching (the first ones in signal order).
    pub max_pairs: usize,
    pub drive: DriveParams,
    /// Route length range for origin/destination draws, meters.
    pub min_route: f64,
    pub max_route: f64,
    /// Trip start times are drawn uniformly below this, seconds.
    pub max_start_time: i64,
    pub pair: PairCriteria,
    pub test_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            trips: 240,
            max_pairs: 200,
            drive: DriveParams::default(),
            min_route: 1500.0,
            max_route: 5000.0,
            max_start_time: 7200,
            pair: PairCriteria::default(),
            test_count: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    /// Frames per video.
    #[serde(rename = "F")]
    pub frames: usize,
    pub size_px: usize,
    /// Side of the square viewport, meters.
    pub extent_m: f64,
    /// Videos written frame by frame; the rest stay in memory.
    pub export_videos: usize,
    pub style: RenderStyle,
    pub map: MapStyle,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            frames: 21,
            size_px: 256,
            extent_m: 8000.0,
            export_videos: 4,
            style: RenderStyle::default(),
            map: MapStyle::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    pub log_every: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            lr: 5e-7,
            momentum: 0.9,
            clip_norm: Some(2e5),
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub iterations: usize,
    pub train: TrainConfig,
    pub reward: RewardConfig,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            iterations: 150,
            train: TrainConfig::default(),
            reward: RewardConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub baseline: RuleSigParams,
    /// Reward mode for the held-out SDE reward summary.
    pub reward_mode: RewardMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            baseline: RuleSigParams::default(),
            reward_mode: RewardMode::Pixel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub render: RenderConfig,
    pub policy: PolicyConfig,
    pub sft: SftConfig,
    pub rl: RlConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            world: WorldConfig::default(),
            data: DataConfig::default(),
            render: RenderConfig::default(),
            policy: PolicyConfig::default(),
            sft: SftConfig::default(),
            rl: RlConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        self.rl.train.validate()?;
        self.rl.reward.validate()?;
        self.render.style.validate(&[self.render.map.road, self.render.map.background])?;
        if self.render.frames < 2 {
            return Err(Error::Config("render.F must be at least 2".into()));
        }
        if self.data.drive.dt <= 0 {
            return Err(Error::Config("data.drive.dt must be positive".into()));
        }
        if self.sft.batch == 0 || self.sft.log_every == 0 {
            return Err(Error::Config("sft.batch and sft.log_every must be positive".into()));
        }
        if !(self.data.min_route < self.data.max_route) {
            return Err(Error::Config("data.min_route must be below data.max_route".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenWorld,
    GenData,
    Pair,
    Render,
    TrainSft,
    TrainRl,
    Baseline,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::GenWorld,
        Stage::GenData,
        Stage::Pair,
        Stage::Render,
        Stage::TrainSft,
        Stage::TrainRl,
        Stage::Baseline,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenWorld => "gen-world",
            Stage::GenData => "gen-data",
            Stage::Pair => "pair",
            Stage::Render => "render",
            Stage::TrainSft => "train-sft",
            Stage::TrainRl => "train-rl",
            Stage::Baseline => "baseline",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }

    /// Parses a comma-separated list; `all` selects every stage.
    pub fn parse_list(s: &str) -> Result<Vec<Stage>> {
        if s.trim() == "all" {
            return Ok(Stage::ALL.to_vec());
        }
        s.split(',').filter(|p| !p.trim().is_empty()).map(Stage::parse).collect()
    }

    pub fn requires(self) -> &'static [Stage] {
        match self {
            Stage::GenWorld => &[],
            Stage::GenData => &[Stage::GenWorld],
            Stage::Pair => &[Stage::GenData],
            Stage::Render => &[Stage::Pair],
            Stage::TrainSft => &[Stage::Render],
            Stage::TrainRl => &[Stage::TrainSft],
            Stage::Baseline => &[Stage::Pair],
            Stage::Eval => &[Stage::TrainSft, Stage::Baseline],
            Stage::Report => &[Stage::Eval],
        }
    }
}

/// Parsed `manifest.txt`: one header line with the config hash, then one line per
/// executed stage, each a list of `key=value` fields.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunManifest {
    pub config_hash: String,
    pub entries: Vec<BTreeMap<String, String>>,
}

impl RunManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = RunManifest::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut fields = BTreeMap::new();
            for tok in line.split_whitespace() {
                let (k, v) = tok
                    .split_once('=')
                    .ok_or_else(|| Error::format("manifest", format!("bad field {tok:?}")))?;
                fields.insert(k.to_string(), v.to_string());
            }
            if let Some(h) = fields.get("config_hash") {
                m.config_hash = h.clone();
            } else {
                m.entries.push(fields);
            }
        }
        Ok(m)
    }

    pub fn load(out: &Path) -> Result<Self> {
        let p = out.join("manifest.txt");
        if !p.exists() {
            return Ok(Self::default());
        }
        Self::parse(&fs::read_to_string(p)?)
    }

    pub fn completed(&self, stage: Stage) -> bool {
        self.entries.iter().any(|e| e.get("stage").map(String::as_str) == Some(stage.name()))
    }

    /// Latest record of `stage`.
    pub fn stage(&self, stage: Stage) -> Option<&BTreeMap<String, String>> {
        self.entries
            .iter()
            .rev()
            .find(|e| e.get("stage").map(String::as_str) == Some(stage.name()))
    }

    pub fn stages(&self) -> Vec<String> {
        self.entries.iter().filter_map(|e| e.get("stage").cloned()).collect()
    }
}

fn append_manifest(out: &Path, fields: &[(&str, String)]) -> Result<()> {
    use std::io::Write;
    let mut line = String::new();
    for (i, (k, v)) in fields.iter().enumerate() {
        if i > 0 {
            line.push(' ');
        }
        let _ = write!(line, "{k}={v}");
    }
    line.push('\n');
    let mut f = fs::OpenOptions::new().create(true).append(true).open(out.join("manifest.txt"))?;
    f.write_all(line.as_bytes())?;
    Ok(())
}

fn write(out: &Path, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
    let p = out.join(rel);
    if let Some(dir) = p.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(p, bytes)?;
    Ok(())
}

fn read(out: &Path, rel: &str) -> Result<String> {
    Ok(fs::read_to_string(out.join(rel))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::format("pairs.csv", format!("unknown split {s}"))),
        }
    }
}

pub const SUBSETS: [&str; 3] = ["small", "medium", "large"];

/// One paired training/evaluation sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: usize,
    pub signal: SignalSequence,
    pub gps: GpsTrajectory,
    pub split: Split,
    /// Index into [`SUBSETS`].
    pub subset: usize,
    pub viewport: Viewport,
}

/// Viewport centered on the signaling bounding box.
pub fn sample_viewport(signal: &SignalSequence, cfg: &RenderConfig) -> Result<Viewport> {
    let towers = signal.towers();
    let first = *towers.first().ok_or(Error::Empty("signaling sequence"))?;
    let (mut lo, mut hi) = (first, first);
    for t in &towers {
        lo = WorldPoint::new(lo.x.min(t.x), lo.y.min(t.y));
        hi = WorldPoint::new(hi.x.max(t.x), hi.y.max(t.y));
    }
    Viewport::centered(lo.lerp(hi, 0.5), cfg.extent_m, cfg.size_px)
}

/// Splits `n` items: `test` first, then the remainder 7:2 into train and validation.
pub fn split_sizes(n: usize, test: usize) -> (usize, usize, usize) {
    let test = test.min(n);
    let rest = n - test;
    let train = (rest * 7 + 4) / 9;
    (train, rest - train, test)
}

/// Subset label per item from distance-quantile thirds; the first third takes any extra item.
pub fn distance_thirds(dist: &[f64]) -> Vec<usize> {
    let n = dist.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| dist[*a].total_cmp(&dist[*b]).then(a.cmp(b)));
    let small = n.div_ceil(3);
    let medium = (n - small).div_ceil(2);
    let mut label = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        label[i] = if rank < small {
            0
        } else if rank < small + medium {
            1
        } else {
            2
        };
    }
    label
}

fn load_network(out: &Path) -> Result<RoadNetwork> {
    RoadNetwork::from_text(&read(out, "world/network.txt")?)
}

fn load_samples(out: &Path, cfg: &RunConfig) -> Result<Vec<Sample>> {
    let text = read(out, "pairs.csv")?;
    let mut samples = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::format("pairs.csv", format!("expected 7 fields: {line}")));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format("pairs.csv", format!("bad number {s}")));
        let (id, si, gi) = (num(f[0])?, num(f[1])?, num(f[2])?);
        let signal = SignalSequence::from_csv(&read(out, &format!("data/signal_{si:04}.csv"))?)?;
        let gps = GpsTrajectory::from_csv(&read(out, &format!("data/gps_{gi:04}.csv"))?)?;
        let subset = SUBSETS
            .iter()
            .position(|s| *s == f[5])
            .ok_or_else(|| Error::format("pairs.csv", format!("unknown subset {}", f[5])))?;
        let viewport = sample_viewport(&signal, &cfg.render)?;
        samples.push(Sample {
            id,
            signal,
            gps,
            split: Split::parse(f[4])?,
            subset,
            viewport,
        });
    }
    Ok(samples)
}

/// Network, paired samples and their drawing conditions from a run that finished `pair`.
pub fn load_corpus(out: &Path, cfg: &RunConfig) -> Result<(RoadNetwork, Vec<Sample>, Vec<DrawCondition>)> {
    let net = load_network(out)?;
    let samples = load_samples(out, cfg)?;
    let conds = build_conditions(&net, &samples, cfg)?;
    Ok((net, samples, conds))
}

/// Condition image plus policy context of every sample, in sample order.
pub fn build_conditions(net: &RoadNetwork, samples: &[Sample], cfg: &RunConfig) -> Result<Vec<DrawCondition>> {
    samples
        .par_iter()
        .map(|s| {
            let map = rasterize_map(net, &s.viewport, &cfg.render.map)?;
            let image = render_condition(&map, &s.signal, &cfg.render.style);
            DrawCondition::new(image, s.signal.clone(), cfg.data.drive.dt, cfg.render.frames)
        })
        .collect()
}

/// Reward targets in the given mode; pixel targets are read back from rendered truth videos.
pub fn build_targets(
    samples: &[Sample],
    conds: &[DrawCondition],
    cfg: &RunConfig,
    mode: RewardMode,
) -> Result<Vec<RewardTarget>> {
    samples
        .par_iter()
        .zip(conds)
        .map(|(s, c)| {
            let ends = frame_endpoints(&s.gps.positions(), cfg.render.frames);
            match mode {
                RewardMode::Oracle => Ok(RewardTarget::from_points(ends, &cfg.rl.reward)),
                RewardMode::Pixel => {
                    let video = render_target_video(&c.image, &s.gps, cfg.render.frames, &cfg.render.style)?;
                    RewardTarget::from_frames(&video.frames, &c.image, &ends, &cfg.render.style, &cfg.rl.reward)
                }
            }
        })
        .collect()
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn stage_gen_world(cfg: &RunConfig, out: &Path) -> Result<Vec<(&'static str, String)>> {
    let net = generate_network(rng::derive(cfg.seed, &[TAG_WORLD]), &cfg.world.network)?;
    let towers = place_towers(
        &net,
        cfg.world.towers,
        cfg.world.tower_min_separation,
        rng::derive(cfg.seed, &[TAG_TOWERS]),
    )?;
    write(out, "world/network.txt", net.to_text())?;
    write(out, "world/towers.csv", towers.to_csv())?;
    Ok(vec![
        ("nodes", net.nodes().len().to_string()),
        ("edges", net.edges().len().to_string()),
        ("towers", towers.towers.len().to_string()),
        ("artifacts", "world/network.txt,world/towers.csv".into()),
    ])
}

fn draw_trip(net: &RoadNetwork, cfg: &RunConfig, i: usize) -> Result<(GpsTrajectory, u64)> {
    let seed = rng::derive(cfg.seed, &[TAG_TRIP, i as u64]);
    let mut r = rng::rng(seed);
    let n = net.nodes().len();
    for _ in 0..1000 {
        let (o, d) = (r.random_range(0..n), r.random_range(0..n));
        if o == d {
            continue;
        }
        let path = net.shortest_path(o, d)?;
        if path.length < cfg.data.min_route || path.length > cfg.data.max_route {
            continue;
        }
        let drive = DriveParams {
            start_time: r.random_range(0..cfg.data.max_start_time.max(1)),
            ..cfg.data.drive
        };
        let gps = simulate_gps(net, o, d, &drive, rng::derive(seed, &[1]))?;
        return Ok((gps, rng::derive(seed, &[2])));
    }
    Err(Error::InvalidParam(format!("no origin/destination pair fits the route range for trip {i}")))
}

fn stage_gen_data(cfg: &RunConfig, out: &Path) -> Result<Vec<(&'static str, String)>> {
    let net = load_network(out)?;
    let towers = TowerSet::from_csv(&read(out, "world/towers.csv")?)?;
    let trips: Vec<Result<(GpsTrajectory, SignalSequence)>> = (0..cfg.data.trips)
        .into_par_iter()
        .map(|i| {
            let (gps, sig_seed) = draw_trip(&net, cfg, i)?;
            let sig = simulate_signaling(&gps, &towers, &cfg.world.signal, sig_seed)?;
            Ok((gps, sig))
        })
        .collect();
    for (i, t) in trips.into_iter().enumerate() {
        let (gps, sig) = t?;
        write(out, &format!("data/gps_{i:04}.csv"), gps.to_csv())?;
        write(out, &format!("data/signal_{i:04}.csv"), sig.to_csv())?;
    }
    Ok(vec![
        ("trips", cfg.data.trips.to_string()),
        ("artifacts", "data/gps_*.csv,data/signal_*.csv".into()),
    ])
}

fn stage_pair(cfg: &RunConfig, out: &Path) -> Result<Vec<(&'static str, String)>> {
    let n = cfg.data.trips;
    let mut signals = Vec::with_capacity(n);
    let mut pool = Vec::with_capacity(n);
    for i in 0..n {
        signals.push(SignalSequence::from_csv(&read(out, &format!("data/signal_{i:04}.csv"))?)?);
        pool.push(GpsTrajectory::from_csv(&read(out, &format!("data/gps_{i:04}.csv"))?)?);
    }
    let matched = match_pairs(&signals, &pool, &cfg.data.pair);
    let n_matched = matched.len();
    // the truth must lie inside the viewport the signaling defines
    let mut kept = Vec::new();
    for p in matched {
        let vp = sample_viewport(&p.signal, &cfg.render)?;
        if p.gps.points().iter().all(|g| vp.contains(g.pos)) {
            kept.push(p);
        }
        if kept.len() == cfg.data.max_pairs {
            break;
        }
    }
    let total = kept.len();
    if total < 2 {
        return Err(Error::Empty("paired corpus"));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng::rng(rng::derive(cfg.seed, &[TAG_SPLIT])));
    let (train, val, test) = split_sizes(total, cfg.data.test_count);
    let mut split = vec![Split::Train; total];
    for (rank, &i) in order.iter().enumerate() {
        split[i] = if rank < test {
            Split::Test
        } else if rank < test + train {
            Split::Train
        } else {
            Split::Val
        };
    }
    let od: Vec<f64> = kept.iter().map(|p| p.gps.od_distance()).collect();
    let subset = distance_thirds(&od);
    let mut csv = String::from("pair_id,signal_index,gps_index,mismatch,split,subset,od_distance\n");
    for (id, p) in kept.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{id},{},{},{:.3},{},{},{:.3}",
            p.signal_index,
            p.gps_index,
            p.mismatch,
            split[id].as_str(),
            SUBSETS[subset[id]],
            od[id]
        );
    }
    write(out, "pairs.csv", csv)?;
    Ok(vec![
        ("matched", n_matched.to_string()),
        ("pairs", total.to_string()),
        ("train", train.to_string()),
        ("val", val.to_string()),
        ("test", test.to_string()),
        ("artifacts", "pairs.csv".into()),
    ])
}

fn stage_render(cfg: &RunConfig, out: &Path) -> Result<Vec<(&'static str, String)>> {
    let net = load_network(out)?;
    let samples = load_samples(out, cfg)?;
    let conds = build_conditions(&net, &samples, cfg)?;
    let mut index = String::from("pair_id,frames,width,height,origin_x,origin_y,extent_m,clamped,condition_sha256\n");
    for (s, c) in samples.iter().zip(&conds) {
        let vp = c.image.viewport;
        let digest = hex::encode(Sha256::digest(c.image.raster.bytes()));
        let _ = writeln!(
            index,
            "{},{},{},{},{:.3},{:.3},{:.3},{},{}",
            s.id, cfg.render.frames, vp.width, vp.height, vp.origin.x, vp.origin.y, vp.extent_x, c.image.clamped, &digest[..16]
        );
    }
    write(out, "render/index.csv", index)?;
    let export = cfg.render.export_videos.min(samples.len());
    for (s, c) in samples.iter().zip(&conds).take(export) {
        write(out, &format!("render/cond_{:04}.ppm", s.id), ppm::encode(&c.image.raster))?;
        let video = render_target_video(&c.image, &s.gps, cfg.render.frames, &cfg.render.style)?;
        write_video(&out.join(format!("render/video_{:04}", s.id)), &video, &cfg.render.style)?;
    }
    Ok(vec![
        ("conditions", samples.len().to_string()),
        ("videos", export.to_string()),
        ("style", cfg.render.style.hash()),
        ("artifacts", "render/index.csv,render/cond_*.ppm,render/video_*".into()),
    ])
}

/// Supervised training on the train split; returns the policy and the loss curve.
pub fn train_sft(
    conds: &[DrawCondition],
    samples: &[Sample],
    cfg: &RunConfig,
) -> Result<(DrawPolicy, Vec<(usize, f64)>)> {
    let train: Vec<usize> = samples.iter().filter(|s| s.split == Split::Train).map(|s| s.id).collect();
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let examples: Vec<_> = samples
        .iter()
        .zip(conds)
        .map(|(s, c)| sft_example(c, &frame_endpoints(&s.gps.positions(), cfg.render.frames), &cfg.policy.features))
        .collect::<Result<_>>()?;
    let mut policy = DrawPolicy::new(cfg.policy, rng::derive(cfg.seed, &[TAG_SFT, 0]))?;
    let mut opt = Sgd::new(cfg.sft.lr, cfg.sft.momentum, cfg.sft.clip_norm);
    let mut r = rng::rng(rng::derive(cfg.seed, &[TAG_SFT, 1]));
    let mut curve = Vec::new();
    let mut window = 0.0;
    for step in 0..cfg.sft.steps {
        let batch: Vec<_> = (0..cfg.sft.batch).map(|_| &examples[train[r.random_range(0..train.len())]]).collect();
        window += sft_batch_step(&mut policy, &batch, &mut opt)?;
        if (step + 1) % cfg.sft.log_every == 0 {
            curve.push((step + 1, window / cfg.sft.log_every as f64));
            window = 0.0;
        }
    }
    let val: Vec<f64> = samples
        .iter()
        .filter(|s| s.split == Split::Val)
        .map(|s| sft_loss(&policy, &examples[s.id]))
        .collect();
    if !val.is_empty() {
        log::info!("sft validation loss {:.1}", val.iter().sum::<f64>() / val.len() as f64);
    }
    Ok((policy, curve))
}

fn stage_train_sft(cfg: &RunConfig, out: &Path) -> Result<Vec<(&'static str, String)>> {
    let net = load_network(out)?;
    let samples = load_samples(out, cfg)?;
    let conds = build_conditions(&net, &samples, cfg)?;
    let (policy, curve) = train_sft(&conds, &samples, cfg)?;
    write(out, "models/sft.ckpt", policy.to_bytes())?;
    let mut csv = String::from("step,loss\n");
    for (s, l) in &curve {
        let _ = writeln!(csv, "{s},{l:.6}");
    }
    write(out, "models/sft_loss.csv", csv)?;
    Ok(vec![
        ("steps", cfg.sft.steps.to_string()),
        ("final_loss", curve.last().map_or("nan".into(), |c| fmt(c.1))),
        ("artifacts", "models/sft.ckpt,models/sft_loss.csv".into()),
    ])
}

fn load_policy(out: &Path, name: &str) -> Result<DrawPolicy> {
    DrawPolicy::from_bytes(&fs::read(out.join(format!("models/{name}.ckpt")))?)
}

fn stage_train_rl(cfg: &RunConfig, out: &Path) -> Result<Vec<(&'static str, String)>> {
    let net = load_network(out)?;
    let samples = load_samples(out, cfg)?;
    let conds = build_conditions(&net, &samples, cfg)?;
    let mode = cfg.rl.train.reward_mode;
    let targets = build_targets(&samples, &conds, cfg, mode)?;
    let mut policy = load_policy(out, "sft")?;
    let pool: Vec<usize> = samples.iter().filter(|s| s.split == Split::Train).map(|s| s.id).collect();
    let ctx = RewardContext {
        conditions: &conds,
        targets: &targets,
        style: &cfg.render.style,
        reward: &cfg.rl.reward,
    };
    let stats = train_rl(
        &mut policy,
        &pool,
        &ctx,
        &cfg.rl.train,
        cfg.rl.iterations,
        rng::derive(cfg.seed, &[TAG_RL]),
    )?;
    write(out, "models/rl.ckpt", policy.to_bytes())?;
    write(out, "models/training_log.csv", training_log_csv(&stats))?;
    let mut diag = String::from("iter,mean_ratio_at_old,clip_frac_at_old,mean_ratio,clip_frac\n");
    for s in &stats {
        let _ = writeln!(
            diag,
            "{},{:.9},{:.9},{:.9},{:.9}",
            s.iter, s.mean_ratio_at_old, s.clip_frac_at_old, s.mean_ratio, s.clip_frac
        );
    }
    write(out, "models/training_diag.csv", diag)?;
    let last = stats.last();
    Ok(vec![
        ("iterations", cfg.rl.iterations.to_string()),
        ("final_mean_total", last.map_or("nan".into(), |s| fmt(s.mean_total))),
        ("artifacts", "models/rl.ckpt,models/training_log.csv,models/training_diag.csv".into()),
    ])
}

fn stage_baseline(cfg: &RunConfig, out: &Path) -> Result<Vec<(&'static str, String)>> {
    let net = load_network(out)?;
    let samples = load_samples(out, cfg)?;
    let test: Vec<&Sample> = samples.iter().filter(|s| s.split == Split::Test).collect();
    let preds: Vec<Result<GpsTrajectory>> = test
        .par_iter()
        .map(|s| rule_sig(&s.signal, &net, cfg.data.drive.dt, &cfg.eval.baseline))
        .collect();
    let mut csv = String::from("pair_id,t,x,y\n");
    for (s, p) in test.iter().zip(preds) {
        for g in p?.points() {
            let _ = writeln!(csv, "{},{},{:.3},{:.3}", s.id, g.t, g.pos.x, g.pos.y);
        }
    }
    write(out, "baseline/rule_sig.csv", csv)?;
    Ok(vec![
        ("trajectories", test.len().to_string()),
        ("artifacts", "baseline/rule_sig.csv".into()),
    ])
}

fn load_baseline(out: &Path, dt: i64) -> Result<BTreeMap<usize, GpsTrajectory>> {
    let mut rows: BTreeMap<usize, Vec<crate::simdata::GpsPoint>> = BTreeMap::new();
    for line in read(out, "baseline/rule_sig.csv")?.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::format("baseline/rule_sig.csv", format!("bad row {line}"));
        if f.len() != 4 {
            return Err(bad());
        }
        let id: usize = f[0].parse().map_err(|_| bad())?;
        let t: i64 = f[1].parse().map_err(|_| bad())?;
        let x: f64 = f[2].parse().map_err(|_| bad())?;
        let y: f64 = f[3].parse().map_err(|_| bad())?;
        rows.entry(id).or_default().push(crate::simdata::GpsPoint {
            pos: WorldPoint::new(x, y),
            t,
        });
    }
    rows.into_iter().map(|(id, pts)| Ok((id, GpsTrajectory::new(pts, dt)?))).collect()
}

/// Frame-aligned truth points and their timestamps.
fn frame_truth(gps: &GpsTrajectory, frames: usize) -> (Vec<WorldPoint>, Vec<f64>) {
    let n = gps.len();
    let idx: Vec<usize> = (1..=frames).map(|m| crate::render::prefix_len(m, n, frames) - 1).collect();
    (
        idx.iter().map(|&i| gps.points()[i].pos).collect(),
        idx.iter().map(|&i| gps.points()[i].t as f64).collect(),
    )
}

fn summary_key(model: &str, what: &str) -> &'static str {
    match (model, what) {
        ("sft", "mae") => "sft_mae",
        ("rl", "mae") => "rl_mae",
        ("rule_sig", "mae") => "rule_sig_mae",
        ("sft", _) => "sft_sde_total",
        ("rl", _) => "rl_sde_total",
        _ => "other",
    }
}

fn stage_eval(cfg: &RunConfig, out: &Path) -> Result<Vec<(&'static str, String)>> {
    let net = load_network(out)?;
    let samples = load_samples(out, cfg)?;
    let manifest = RunManifest::load(out)?;
    let conds = build_conditions(&net, &samples, cfg)?;
    let test: Vec<usize> = samples.iter().filter(|s| s.split == Split::Test).map(|s| s.id).collect();
    let baseline = load_baseline(out, cfg.data.drive.dt)?;
    let mut models: Vec<(&str, Option<DrawPolicy>)> = vec![("sft", Some(load_policy(out, "sft")?))];
    if manifest.completed(Stage::TrainRl) {
        models.push(("rl", Some(load_policy(out, "rl")?)));
    }
    models.push(("rule_sig", None));
    let frames = cfg.render.frames;
    let mut metrics = String::from("model,subset,n,mae,rmse,l100,g1000\n");
    let mut summary = Vec::new();
    for (name, policy) in &models {
        // per-sample point errors at the frame-aligned truth points
        let errs: Vec<Result<Vec<f64>>> = test
            .par_iter()
            .map(|&id| {
                let s = &samples[id];
                let (truth, times) = frame_truth(&s.gps, frames);
                let pred: Vec<WorldPoint> = match policy {
                    Some(p) => sample_rollout(p, &conds[id], DecodeMode::Ode, 0).points,
                    None => {
                        let b = baseline.get(&id).ok_or_else(|| Error::MissingStage("baseline".into()))?;
                        times.iter().map(|t| b.position_at(*t)).collect()
                    }
                };
                point_errors(&pred, &truth)
            })
            .collect();
        let errs: Vec<Vec<f64>> = errs.into_iter().collect::<Result<_>>()?;
        for (si, subset) in SUBSETS.iter().chain(std::iter::once(&"all")).enumerate() {
            let pooled: Vec<f64> = test
                .iter()
                .zip(&errs)
                .filter(|(id, _)| si == 3 || samples[**id].subset == si)
                .flat_map(|(_, e)| e.iter().copied())
                .collect();
            if pooled.is_empty() {
                continue;
            }
            let m: MetricsReport = eval_metrics(&pooled)?;
            let _ = writeln!(
                metrics,
                "{name},{subset},{},{:.6},{:.6},{:.6},{:.6}",
                pooled.len() / frames,
                m.mae,
                m.rmse,
                m.l100,
                m.g1000
            );
            if *subset == "all" {
                summary.push((summary_key(name, "mae"), fmt(m.mae)));
            }
        }
    }
    write(out, "eval/metrics.csv", metrics)?;

    // held-out rewards of stochastic rollouts, same noise seeds for every model
    let mode = cfg.eval.reward_mode;
    let targets = build_targets(&samples, &conds, cfg, mode)?;
    let ctx = RewardContext {
        conditions: &conds,
        targets: &targets,
        style: &cfg.render.style,
        reward: &cfg.rl.reward,
    };
    let seed = rng::derive(cfg.seed, &[TAG_EVAL]);
    let mut rewards = String::from("model,mode,r_dist,r_dir,r_cont,total\n");
    let mut audit = Vec::new();
    for (name, policy) in &models {
        let Some(p) = policy else { continue };
        let r = mean_rollout_reward(p, &test, &ctx, mode, seed)?;
        let total: f64 = r.iter().sum();
        let _ = writeln!(
            rewards,
            "{name},{},{:.9},{:.9},{:.9},{:.9}",
            mode.as_str(),
            r[0],
            r[1],
            r[2],
            total
        );
        summary.push((summary_key(name, "sde_total"), format!("{total:.9}")));
        for &id in &test {
            let t = sample_rollout(p, &conds[id], DecodeMode::Sde, rng::derive(seed, &[id as u64]));
            audit.push(AuditRow {
                sample_id: id,
                rollout_id: if *name == "sft" { 0 } else { 1 },
                reward: ctx.score(id, &t, mode)?,
            });
        }
    }
    write(out, "eval/rewards.csv", rewards)?;
    write(out, "eval/reward_audit.csv", audit_csv(&audit))?;
    let mut fields: Vec<(&'static str, String)> = vec![
        ("test", test.len().to_string()),
        ("artifacts", "eval/metrics.csv,eval/rewards.csv,eval/reward_audit.csv".into()),
    ];
    fields.extend(summary);
    Ok(fields)
}

fn stage_report(_cfg: &RunConfig, out: &Path) -> Result<Vec<(&'static str, String)>> {
    let metrics = read(out, "eval/metrics.csv")?;
    let mut table = String::from("model,subset,mae,rmse,l100,g1000\n");
    for line in metrics.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() == 7 {
            let _ = writeln!(table, "{},{},{},{},{},{}", f[0], f[1], f[3], f[4], f[5], f[6]);
        }
    }
    write(out, "report/table.csv", &table)?;
    let mut curve = String::from("phase,step,value\n");
    if let Ok(sft) = read(out, "models/sft_loss.csv") {
        for line in sft.lines().skip(1) {
            let _ = writeln!(curve, "sft_loss,{line}");
        }
    }
    if let Ok(rl) = read(out, "models/training_log.csv") {
        for line in rl.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let _ = writeln!(curve, "rl_mean_total,{},{}", f[0], f[4]);
        }
    }
    write(out, "report/training_curve.csv", &curve)?;
    let rewards = read(out, "eval/rewards.csv")?;
    let summary = format!("Point-error metrics (meters, fractions)\n\n{table}\nHeld-out stochastic rollout rewards\n\n{rewards}");
    write(out, "report/summary.txt", summary)?;
    Ok(vec![(
        "artifacts",
        "report/table.csv,report/training_curve.csv,report/summary.txt".into(),
    )])
}

/// Runs the requested stages in pipeline order inside `out`.
pub fn run_experiment(cfg: &RunConfig, out: &Path, stages: &[Stage]) -> Result<RunManifest> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let resolved = cfg.to_toml();
    let cfg_path = out.join("config.toml");
    if cfg_path.exists() {
        if fs::read_to_string(&cfg_path)? != resolved {
            return Err(Error::Config(format!(
                "run directory {} was created with a different configuration",
                out.display()
            )));
        }
    } else {
        fs::write(&cfg_path, &resolved)?;
        append_manifest(out, &[("config_hash", cfg.hash()), ("seed", cfg.seed.to_string())])?;
    }
    let mut todo = stages.to_vec();
    todo.sort();
    todo.dedup();
    for stage in todo {
        let manifest = RunManifest::load(out)?;
        if let Some(missing) = stage.requires().iter().find(|s| !manifest.completed(**s)) {
            return Err(Error::MissingStage(missing.name().to_string()));
        }
        log::info!("stage {}", stage.name());
        let fields = match stage {
            Stage::GenWorld => stage_gen_world(cfg, out)?,
            Stage::GenData => stage_gen_data(cfg, out)?,
            Stage::Pair => stage_pair(cfg, out)?,
            Stage::Render => stage_render(cfg, out)?,
            Stage::TrainSft => stage_train_sft(cfg, out)?,
            Stage::TrainRl => stage_train_rl(cfg, out)?,
            Stage::Baseline => stage_baseline(cfg, out)?,
            Stage::Eval => stage_eval(cfg, out)?,
            Stage::Report => stage_report(cfg, out)?,
        };
        let mut line = vec![("stage", stage.name().to_string())];
        line.extend(fields);
        append_manifest(out, &line)?;
    }
    RunManifest::load(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_and_thirds() {
        assert_eq!(split_sizes(200, 64), (106, 30, 64));
        assert_eq!(split_sizes(10, 64), (0, 0, 10));
        let (a, b, c) = split_sizes(1000, 100);
        assert_eq!((a, b, c), (700, 200, 100));
        let d: Vec<f64> = (0..10_000).map(|i| ((i * 7919) % 10_000) as f64).collect();
        let l = distance_thirds(&d);
        let counts: Vec<usize> = (0..3).map(|k| l.iter().filter(|x| **x == k).count()).collect();
        assert_eq!(counts, vec![3334, 3333, 3333]);
        for i in 0..d.len() {
            for j in 0..d.len().min(50) {
                if d[i] < d[j] {
                    assert!(l[i] <= l[j]);
                }
            }
        }
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.name()).unwrap(), s);
        }
        assert_eq!(Stage::parse_list("all").unwrap(), Stage::ALL.to_vec());
        assert_eq!(Stage::parse_list("eval,pair").unwrap(), vec![Stage::Eval, Stage::Pair]);
        assert!(Stage::parse_list("train").is_err());
    }

    #[test]
    fn config_rejects_unknown_keys_and_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(matches!(RunConfig::from_toml("[world]\nbogus = 1\n"), Err(Error::Config(_))));
        let partial = RunConfig::from_toml("seed = 3\n[render]\nF = 13\n").unwrap();
        assert_eq!((partial.seed, partial.render.frames), (3, 13));
        assert_eq!(partial.render.size_px, 256);
    }

    #[test]
    fn manifest_parsing() {
        let m = RunManifest::parse("config_hash=abc seed=1\nstage=gen-world nodes=4\nstage=pair train=3\n").unwrap();
        assert_eq!(m.config_hash, "abc");
        assert!(m.completed(Stage::GenWorld) && m.completed(Stage::Pair) && !m.completed(Stage::Eval));
        assert_eq!(m.stage(Stage::Pair).unwrap()["train"], "3");
        assert_eq!(m.stages(), vec!["gen-world", "pair"]);
    }

    #[test]
    fn eval_requires_training() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_experiment(&RunConfig::default(), dir.path(), &[Stage::Eval]).unwrap_err();
        assert!(matches!(err, Error::MissingStage(ref s) if s == "train-sft"), "{err}");
    }
}
