//! Synthetic driving sessions, corpus I/O, normalization and windowing.
//!
//! A session is nine channels at 30 Hz: six vehicle CAN-Bus signals and three
//! driver physiology signals, with interval annotations grouped into
//! candidate / maneuver / normal sets. Generation is a pure function of
//! (seed, config); identical seeds produce byte-identical corpora.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::DaganError;
use crate::tensor::Tensor;

pub const SAMPLE_RATE: usize = 30;
pub const CHANNEL_NAMES: [&str; 9] = [
    "speed",
    "steer_speed",
    "steer_angle",
    "throttle",
    "brake",
    "yaw",
    "hr",
    "br",
    "eda",
];
/// Indices of the physiological channels (hr, br, eda).
pub const PHYSIO_CHANNELS: [usize; 3] = [6, 7, 8];
/// Indices of the CAN-Bus channels.
pub const CAN_CHANNELS: [usize; 6] = [0, 1, 2, 3, 4, 5];

/// Fixed physical ranges used to scale CAN channels to [-1, 1]:
/// (lo, hi) per CAN channel in header order.
pub const CAN_RANGES: [(f64, f64); 6] = [
    (0.0, 120.0),      // speed km/h
    (-2.0, 2.0),       // steer_speed rad/s
    (-7.0, 7.0),       // steer_angle rad
    (0.0, 90.0),       // throttle deg
    (0.0, 5000.0),     // brake kPa
    (-1.0, 1.0),       // yaw rad
];

pub const SESSION_HEADER: &str = "frame,speed,steer_speed,steer_angle,throttle,brake,yaw,hr,br,eda";
pub const ANNOTATION_HEADER: &str = "start_s,end_s,label,set";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SetLabel {
    Normal,
    Candidate,
    Maneuver,
}

impl SetLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            SetLabel::Normal => "normal",
            SetLabel::Candidate => "candidate",
            SetLabel::Maneuver => "maneuver",
        }
    }

    pub fn parse(s: &str) -> Result<Self, DaganError> {
        match s {
            "normal" => Ok(SetLabel::Normal),
            "candidate" => Ok(SetLabel::Candidate),
            "maneuver" => Ok(SetLabel::Maneuver),
            other => Err(DaganError::Parse(format!("unknown set label '{other}'"))),
        }
    }
}

impl fmt::Display for SetLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub start_s: f64,
    pub end_s: f64,
    pub label: String,
    pub set: SetLabel,
}

/// One 9-channel 30 Hz recording with its annotations.
#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    pub channels: Vec<Vec<f64>>, // 9 x T
    pub annotations: Vec<Annotation>,
}

impl Session {
    pub fn frames(&self) -> usize {
        self.channels[0].len()
    }

    pub fn seconds(&self) -> f64 {
        self.frames() as f64 / SAMPLE_RATE as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self, DaganError> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(DaganError::Usage(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub sessions: BTreeMap<String, Session>,
    pub split: SplitSpec,
}

impl Corpus {
    pub fn sessions_for(&self, split: Split) -> Vec<&Session> {
        self.split
            .ids(split)
            .iter()
            .filter_map(|id| self.sessions.get(id))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CorpusSpec {
    pub seed: u64,
    pub train_min: usize,
    pub dev_min: usize,
    pub test_min: usize,
    /// candidate events per minute
    pub event_rate: f64,
}

/// Preferred session length; splits are carved into chunks of this size with
/// one shorter remainder session if the minutes do not divide evenly.
const SESSION_MINUTES: usize = 5;

const MANEUVER_RATE_PER_MIN: f64 = 2.0;
const CANDIDATE_DUR_S: f64 = 8.0;
const TURN_DUR_S: f64 = 6.0;
const STOP_DUR_S: f64 = 10.0;

#[derive(Clone, Copy, PartialEq)]
enum EventKind {
    Candidate,
    Turn(f64),   // signed amplitude, rad
    Stop,
}

struct Event {
    onset_s: f64,
    dur_s: f64,
    kind: EventKind,
}

/// Generate the full seeded corpus.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus, DaganError> {
    if spec.train_min == 0 || spec.dev_min == 0 || spec.test_min == 0 {
        return Err(DaganError::Usage("split minutes must be positive".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut sessions = BTreeMap::new();
    let mut split = SplitSpec::default();
    for (name, minutes, ids) in [
        ("train", spec.train_min, &mut split.train),
        ("dev", spec.dev_min, &mut split.dev),
        ("test", spec.test_min, &mut split.test),
    ] {
        let mut remaining = minutes;
        let mut idx = 0;
        while remaining > 0 {
            let m = remaining.min(SESSION_MINUTES);
            remaining -= m;
            let id = format!("{name}_{idx:03}");
            let session_seed: u64 = master.gen();
            let session = synth_session(&id, m * 60, spec.event_rate, session_seed);
            ids.push(id.clone());
            sessions.insert(id, session);
            idx += 1;
        }
    }
    Ok(Corpus { sessions, split })
}

fn exp_gap(rng: &mut ChaCha8Rng, rate_per_min: f64) -> f64 {
    // seconds between events of a Poisson process
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    -u.ln() / (rate_per_min / 60.0)
}

fn schedule_events(rng: &mut ChaCha8Rng, secs: f64, event_rate: f64) -> Vec<Event> {
    let mut events: Vec<Event> = Vec::new();
    // candidates first so maneuvers never displace them
    if event_rate > 0.0 {
        let mut t = exp_gap(rng, event_rate);
        while t + CANDIDATE_DUR_S + 3.0 < secs {
            events.push(Event {
                onset_s: t,
                dur_s: CANDIDATE_DUR_S,
                kind: EventKind::Candidate,
            });
            t += CANDIDATE_DUR_S + exp_gap(rng, event_rate);
        }
    }
    let mut t = exp_gap(rng, MANEUVER_RATE_PER_MIN);
    while t + STOP_DUR_S + 3.0 < secs {
        let is_turn = rng.gen_bool(0.65);
        let kind = if is_turn {
            let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            EventKind::Turn(dir * rng.gen_range(0.6..1.3))
        } else {
            EventKind::Stop
        };
        let dur = match kind {
            EventKind::Turn(_) => TURN_DUR_S,
            _ => STOP_DUR_S,
        };
        let clear = events
            .iter()
            .all(|e| t + dur + 2.5 < e.onset_s || t > e.onset_s + e.dur_s + 2.5);
        if clear {
            events.push(Event {
                onset_s: t,
                dur_s: dur,
                kind,
            });
        }
        t += dur + exp_gap(rng, MANEUVER_RATE_PER_MIN);
    }
    events.sort_by(|a, b| a.onset_s.partial_cmp(&b.onset_s).unwrap());
    events
}

struct Ou {
    value: f64,
    mean: f64,
    theta: f64,
    sigma: f64,
}

impl Ou {
    fn new(mean: f64, theta: f64, sigma: f64) -> Self {
        Ou {
            value: mean,
            mean,
            theta,
            sigma,
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng, dt: f64) -> f64 {
        let noise: f64 = {
            // Box-Muller from two uniforms keeps the draw count fixed per step
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        self.value += self.theta * (self.mean - self.value) * dt + self.sigma * dt.sqrt() * noise;
        self.value
    }
}

fn raised_sine_sq(u: f64) -> f64 {
    if !(0.0..=1.0).contains(&u) {
        0.0
    } else {
        let s = (std::f64::consts::PI * u).sin();
        s * s
    }
}

const CANDIDATE_LABELS: [&str; 4] = [
    "avoid_on_road_pedestrian",
    "avoid_on_road_bicyclist",
    "avoid_parked_vehicle",
    "traffic_rule_violation",
];

/// Unannotated texture of ordinary driving. Each annotated-candidate
/// ingredient also occurs on its own in normal time — brake corrections with
/// speed dips, sharp steering jerks, and spontaneous physiological startles —
/// so no single channel statistic separates the sets; only the tightly timed
/// multichannel conjunction does.
enum EpisodeKind {
    /// brake correction; amp is the brake peak
    Brake,
    /// candidate-style slam-and-release brake with a sharp speed dip but no
    /// physiological or steering correlate; amp is the brake peak
    HardBrake,
    /// lane change; amp is the signed steering amplitude
    Lane,
    /// sharp steering correction; amp is the signed jerk amplitude
    Jerk,
    /// spontaneous arousal with no driving correlate; amp is the HR rise
    Startle,
    /// traffic slowdown; amp is the fractional speed-dip depth
    Slowdown,
}

/// Smoothstep trapezoid over [0, 1]: ramps over the first and last quarter,
/// holds at 1 in between.
fn trapezoid(u: f64) -> f64 {
    let edge = |x: f64| {
        let x = (x / 0.25).clamp(0.0, 1.0);
        x * x * (3.0 - 2.0 * x)
    };
    edge(u) * edge(1.0 - u)
}

struct NormalEpisode {
    onset_s: f64,
    dur_s: f64,
    amp: f64,
    kind: EpisodeKind,
}

fn schedule_normal_episodes(rng: &mut ChaCha8Rng, secs: f64) -> Vec<NormalEpisode> {
    let mut out = Vec::new();
    // congestion bouts (~1 per 4 min, 45-90 s): stretches of stop-and-go
    // traffic where slam braking and arousal are ordinary. Feature-wise these
    // windows resemble annotated events; what distinguishes an event is that
    // it erupts out of a calm minute, which only a conditional model sees.
    let mut t = exp_gap(rng, 0.2);
    while t + 50.0 < secs {
        let dur = rng.gen_range(40.0..70.0);
        out.push(NormalEpisode {
            onset_s: t,
            dur_s: dur,
            amp: rng.gen_range(0.25..0.45),
            kind: EpisodeKind::Slowdown,
        });
        // stop-and-go stress: occasional slams, frequent arousal spikes
        let mut bt = t + exp_gap(rng, 1.5);
        while bt + 8.0 < t + dur {
            out.push(NormalEpisode {
                onset_s: bt,
                dur_s: rng.gen_range(5.0..7.0),
                amp: rng.gen_range(1400.0..3200.0),
                kind: EpisodeKind::HardBrake,
            });
            if rng.gen_bool(0.6) {
                out.push(NormalEpisode {
                    onset_s: bt + rng.gen_range(0.0..0.4),
                    dur_s: rng.gen_range(5.0..7.0),
                    amp: rng.gen_range(6.0..14.0),
                    kind: EpisodeKind::Startle,
                });
            }
            bt += 6.0 + exp_gap(rng, 1.5);
        }
        let mut st = t + exp_gap(rng, 5.0);
        while st + 8.0 < t + dur {
            out.push(NormalEpisode {
                onset_s: st,
                dur_s: rng.gen_range(5.0..7.0),
                amp: rng.gen_range(6.0..14.0),
                kind: EpisodeKind::Startle,
            });
            st += 5.0 + exp_gap(rng, 5.0);
        }
        t += dur + exp_gap(rng, 0.2);
    }
    // brake corrections, ~3 per minute, amplitude skewed toward mild
    let mut t = exp_gap(rng, 3.0);
    while t < secs - 6.0 {
        let u: f64 = rng.gen_range(0.0..1.0);
        let dur = rng.gen_range(2.0..5.0);
        out.push(NormalEpisode {
            onset_s: t,
            dur_s: dur,
            amp: 300.0 + 2900.0 * u * u.sqrt(),
            kind: EpisodeKind::Brake,
        });
        t += dur + exp_gap(rng, 3.0);
    }
    // hard brake slams (tailgater ahead, missed exit), ~0.8 per minute: the
    // candidate reaction's CAN shape without its physiological conjunction
    let mut t = exp_gap(rng, 0.8);
    while t < secs - 8.0 {
        let dur = rng.gen_range(5.0..7.0);
        out.push(NormalEpisode {
            onset_s: t,
            dur_s: dur,
            amp: rng.gen_range(1400.0..3200.0),
            kind: EpisodeKind::HardBrake,
        });
        // slamming the brakes startles the driver about half the time; the
        // response starts with the slam, unlike an annotated event where the
        // cause precedes the reaction and the physiology lags by seconds
        if rng.gen_bool(0.5) {
            out.push(NormalEpisode {
                onset_s: t + rng.gen_range(0.0..0.4),
                dur_s: rng.gen_range(5.0..7.0),
                amp: rng.gen_range(6.0..13.0),
                kind: EpisodeKind::Startle,
            });
        }
        t += dur + exp_gap(rng, 0.8);
    }
    // lane changes, ~1.5 per minute
    let mut t = exp_gap(rng, 1.5);
    while t < secs - 6.0 {
        let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let dur = rng.gen_range(3.0..5.0);
        out.push(NormalEpisode {
            onset_s: t,
            dur_s: dur,
            amp: dir * rng.gen_range(0.12..0.5),
            kind: EpisodeKind::Lane,
        });
        t += dur + exp_gap(rng, 1.5);
    }
    // pothole/drift corrections: candidate-scale steering jerks, ~1 per minute
    let mut t = exp_gap(rng, 1.0);
    while t < secs - 6.0 {
        let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let dur = rng.gen_range(0.8..1.6);
        out.push(NormalEpisode {
            onset_s: t,
            dur_s: dur,
            amp: dir * rng.gen_range(0.22..0.45),
            kind: EpisodeKind::Jerk,
        });
        t += dur + exp_gap(rng, 1.0);
    }
    // traffic slowdowns, ~0.7 per minute: plateaued speed dip, light braking
    let mut t = exp_gap(rng, 0.7);
    while t < secs - 12.0 {
        let dur = rng.gen_range(6.0..10.0);
        out.push(NormalEpisode {
            onset_s: t,
            dur_s: dur,
            amp: rng.gen_range(0.2..0.5),
            kind: EpisodeKind::Slowdown,
        });
        t += dur + exp_gap(rng, 0.7);
    }
    // startles (conversation, horn, memory): candidate-scale physiology with
    // no CAN correlate, ~1 per minute
    let mut t = exp_gap(rng, 1.0);
    while t < secs - 8.0 {
        let dur = rng.gen_range(5.0..7.0);
        out.push(NormalEpisode {
            onset_s: t,
            dur_s: dur,
            amp: rng.gen_range(6.0..15.0),
            kind: EpisodeKind::Startle,
        });
        t += dur + exp_gap(rng, 1.0);
    }
    out
}

fn synth_session(id: &str, secs: usize, event_rate: f64, seed: u64) -> Session {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = secs * SAMPLE_RATE;
    let dt = 1.0 / SAMPLE_RATE as f64;
    let events = schedule_events(&mut rng, secs as f64, event_rate);
    let episodes = schedule_normal_episodes(&mut rng, secs as f64);

    // modulation tracks filled by motifs
    let mut speed_mult = vec![1.0; n];
    let mut brake_add = vec![0.0; n];
    let mut steer_add = vec![0.0; n];
    let mut hr_add = vec![0.0; n];
    let mut br_add = vec![0.0; n];
    let mut eda_add = vec![0.0; n];

    for ep in &episodes {
        let f0 = (ep.onset_s * SAMPLE_RATE as f64) as usize;
        let f1 = (((ep.onset_s + ep.dur_s) * SAMPLE_RATE as f64) as usize).min(n);
        if f1 <= f0 {
            continue;
        }
        for f in f0..f1 {
            let u = (f - f0) as f64 / (f1 - f0) as f64;
            let t = (f - f0) as f64 * dt;
            match ep.kind {
                EpisodeKind::Brake => {
                    brake_add[f] += ep.amp * raised_sine_sq(u);
                    speed_mult[f] *= 1.0 - 0.45 * (ep.amp / 3200.0) * raised_sine_sq(u);
                }
                EpisodeKind::HardBrake => {
                    brake_add[f] +=
                        ep.amp * (t / 0.15).min(1.0) * (-(t - 0.15).max(0.0) / 0.6).exp();
                    let dip = if t < 0.8 {
                        t / 0.8
                    } else if t < 2.5 {
                        1.0
                    } else {
                        (1.0 - (t - 2.5) / 4.5).max(0.0)
                    };
                    speed_mult[f] *= 1.0 - 0.45 * (ep.amp / 3200.0) * dip;
                }
                EpisodeKind::Lane => {
                    // out and back: steering returns to center
                    steer_add[f] += ep.amp * (2.0 * std::f64::consts::PI * u).sin() * 0.5
                        + ep.amp * raised_sine_sq(u) * 0.1;
                }
                EpisodeKind::Jerk => {
                    steer_add[f] += ep.amp * (2.0 * std::f64::consts::PI * u).sin();
                }
                EpisodeKind::Slowdown => {
                    speed_mult[f] *= 1.0 - ep.amp * trapezoid(u);
                    if u < 0.4 {
                        brake_add[f] += ep.amp * 1200.0 * raised_sine_sq(u / 0.4);
                    }
                }
                EpisodeKind::Startle => {
                    // same reaction shape as an annotated event, CAN untouched
                    br_add[f] -= (2.5 + 0.15 * ep.amp) * raised_sine_sq(t / 3.0);
                    let t_hr = t - 0.8;
                    if t_hr > 0.0 {
                        hr_add[f] +=
                            ep.amp * (t_hr / 1.5).min(1.0) * (-(t_hr - 1.5).max(0.0) / 3.0).exp();
                    }
                    let t_eda = t - 1.0;
                    if t_eda > 0.0 {
                        eda_add[f] += 0.12
                            * ep.amp
                            * (t_eda / 1.2).min(1.0)
                            * (-(t_eda - 1.2).max(0.0) / 6.0).exp();
                    }
                }
            }
        }
    }

    let mut annotations = Vec::new();
    let mut cand_idx = 0usize;
    for ev in &events {
        let f0 = (ev.onset_s * SAMPLE_RATE as f64) as usize;
        let f1 = (((ev.onset_s + ev.dur_s) * SAMPLE_RATE as f64) as usize).min(n);
        match ev.kind {
            EventKind::Turn(amp) => {
                for f in f0..f1 {
                    let u = (f - f0) as f64 / (f1 - f0) as f64;
                    steer_add[f] += amp * raised_sine_sq(u);
                    speed_mult[f] *= 1.0 - 0.35 * raised_sine_sq(u);
                }
                annotations.push(Annotation {
                    start_s: ev.onset_s,
                    end_s: ev.onset_s + ev.dur_s,
                    label: if amp > 0.0 { "left_turn" } else { "right_turn" }.into(),
                    set: SetLabel::Maneuver,
                });
            }
            EventKind::Stop => {
                let peak = rng.gen_range(900.0..2600.0);
                for f in f0..f1 {
                    let u = (f - f0) as f64 / (f1 - f0) as f64;
                    let mult = if u < 0.35 {
                        1.0 - 0.95 * (u / 0.35)
                    } else if u < 0.6 {
                        0.05
                    } else {
                        0.05 + 0.95 * (u - 0.6) / 0.4
                    };
                    speed_mult[f] *= mult;
                    if u < 0.6 {
                        brake_add[f] += peak * raised_sine_sq(u / 0.6);
                    }
                }
                annotations.push(Annotation {
                    start_s: ev.onset_s,
                    end_s: ev.onset_s + ev.dur_s,
                    label: "stop_for_congestion".into(),
                    set: SetLabel::Maneuver,
                });
            }
            EventKind::Candidate => {
                // an abrupt reaction inside the amplitude range of ordinary
                // corrections — only the time scale and the outsized
                // physiological response set it apart
                let brake_peak = rng.gen_range(1600.0..3200.0);
                let jerk = rng.gen_range(0.25..0.45) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let delay = rng.gen_range(0.5..2.0);
                let hr_amp = rng.gen_range(9.0..16.0);
                let eda_amp = rng.gen_range(0.8..1.8);
                for f in f0..f1 {
                    let t = (f - f0) as f64 * dt;
                    // slam-and-release brake: 0.15 s attack, ~0.6 s release.
                    // Ordinary corrections ramp over seconds; the near-step
                    // onset is what makes the reaction abrupt without pushing
                    // the window's amplitude statistics outside their range.
                    brake_add[f] += brake_peak * (t / 0.15).min(1.0) * (-(t - 0.15).max(0.0) / 0.6).exp();
                    if t < 0.8 {
                        steer_add[f] += jerk * (2.0 * std::f64::consts::PI * t / 0.8).sin();
                    }
                    // speed falls with the brake slam and recovers slowly
                    let dip = if t < 0.8 {
                        t / 0.8
                    } else if t < 2.5 {
                        1.0
                    } else {
                        (1.0 - (t - 2.5) / 4.5).max(0.0)
                    };
                    speed_mult[f] *= 1.0 - 0.45 * dip;
                    // breath drops first, then heart rate and skin conductivity rise
                    br_add[f] -= 4.5 * raised_sine_sq((t - delay) / 3.0);
                    let t_hr = t - delay - 0.8;
                    if t_hr > 0.0 {
                        hr_add[f] +=
                            hr_amp * (t_hr / 1.5).min(1.0) * (-(t_hr - 1.5).max(0.0) / 3.0).exp();
                    }
                    let t_eda = t - delay - 1.0;
                    if t_eda > 0.0 {
                        eda_add[f] +=
                            eda_amp * (t_eda / 1.2).min(1.0) * (-(t_eda - 1.2).max(0.0) / 6.0).exp();
                    }
                }
                // the annotation marks the core of the reaction (slam through
                // the physiological peak), not the slow recovery tail — a
                // window grazing the last second of a fading heart-rate
                // elevation is not an observable event
                annotations.push(Annotation {
                    start_s: ev.onset_s + 1.2,
                    end_s: ev.onset_s + 5.5,
                    label: CANDIDATE_LABELS[cand_idx % CANDIDATE_LABELS.len()].into(),
                    set: SetLabel::Candidate,
                });
                cand_idx += 1;
            }
        }
    }

    // per-session regime offsets: sessions differ in pace and physiology
    let v_offset = rng.gen_range(-6.0..6.0);
    let hr_offset = rng.gen_range(-5.0..5.0);
    let br_offset = rng.gen_range(-1.5..1.5);
    let eda_offset = rng.gen_range(-0.6..0.8);

    // base processes; the slow OUs drift over minutes so window statistics
    // vary a lot marginally while staying predictable from a 60 s context
    let mut v_tgt = Ou::new(35.0 + v_offset, 0.02, 1.2);
    let mut v_drift = Ou::new(0.0, 0.008, 0.5);
    let mut steer_base = Ou::new(0.0, 1.0, 0.06);
    let mut thr_noise = Ou::new(0.0, 0.3, 2.0);
    let mut brake_noise = Ou::new(8.0, 0.5, 4.0);
    let mut yaw_noise = Ou::new(0.0, 0.8, 0.02);
    let mut hr_base = Ou::new(72.0 + hr_offset, 0.1, 1.6);
    let mut hr_drift = Ou::new(0.0, 0.005, 0.35);
    let mut br_base = Ou::new(15.5 + br_offset, 0.12, 0.9);
    let mut eda_base = Ou::new(3.0 + eda_offset, 0.05, 0.18);
    let mut eda_drift = Ou::new(0.0, 0.004, 0.04);

    // arousal: a leaky integral of driving intensity that physiology follows,
    // so ordinary hard events also move heart rate, breath, and conductivity
    let mut arousal = 0.0f64;
    const AROUSAL_IN: f64 = 0.35;
    const AROUSAL_TAU: f64 = 10.0;

    let mut speed_base = 35.0 + v_offset;
    let mut ch: Vec<Vec<f64>> = vec![vec![0.0; n]; 9];
    for f in 0..n {
        let vt = (v_tgt.step(&mut rng, dt) + v_drift.step(&mut rng, dt)).clamp(12.0, 60.0);
        speed_base += 0.6 * (vt - speed_base) * dt;
        let speed = (speed_base * speed_mult[f]).clamp(0.0, 120.0);
        let steer = (steer_base.step(&mut rng, dt) + steer_add[f]).clamp(-7.0, 7.0);
        let braking = brake_add[f] > 100.0 || speed_mult[f] < 0.6;
        let throttle = if braking {
            0.0
        } else {
            (18.0 + 1.2 * (vt - speed_base) + thr_noise.step(&mut rng, dt)).clamp(0.0, 90.0)
        };
        if !braking {
            // keep rng draw parity between branches
        } else {
            let _ = thr_noise.step(&mut rng, dt);
        }
        let brake = (brake_noise.step(&mut rng, dt).max(0.0) + brake_add[f]).clamp(0.0, 5000.0);
        let yaw = (0.5 * steer * (speed / 40.0) + yaw_noise.step(&mut rng, dt)).clamp(-1.0, 1.0);

        let stimulus = (brake_add[f] / 2500.0 + 1.2 * steer_add[f].abs()).min(1.3);
        arousal += (AROUSAL_IN * stimulus - arousal / AROUSAL_TAU) * dt;
        let hr = (hr_base.step(&mut rng, dt) + hr_drift.step(&mut rng, dt)
            + 4.0 * arousal
            + hr_add[f])
            .clamp(45.0, 160.0);
        let br = (br_base.step(&mut rng, dt) - 1.5 * arousal + br_add[f]).clamp(4.0, 40.0);
        let eda = (eda_base.step(&mut rng, dt).max(0.3) + eda_drift.step(&mut rng, dt)
            + 0.5 * arousal
            + eda_add[f])
            .clamp(0.1, 30.0);

        ch[0][f] = speed;
        ch[2][f] = steer;
        ch[3][f] = throttle;
        ch[4][f] = brake;
        ch[5][f] = yaw;
        ch[6][f] = hr;
        ch[7][f] = br;
        ch[8][f] = eda;
    }
    // steering speed as the numerical derivative of the final steering angle
    for f in 1..n {
        ch[1][f] = ((ch[2][f] - ch[2][f - 1]) * SAMPLE_RATE as f64).clamp(-2.0, 2.0);
    }

    Session {
        id: id.to_string(),
        channels: ch,
        annotations,
    }
}

/// Per-session normalization: physiology is z-normalized over the whole
/// session (population std; degenerate channels go to zero), CAN channels are
/// affinely mapped to [-1, 1] with the fixed physical ranges.
pub fn znormalize(session: &Session) -> Result<Session, DaganError> {
    if session.frames() < 2 {
        return Err(DaganError::Usage("znormalize needs at least 2 frames".into()));
    }
    let mut out = session.clone();
    for (slot, &ci) in CAN_CHANNELS.iter().enumerate() {
        let (lo, hi) = CAN_RANGES[slot];
        for v in out.channels[ci].iter_mut() {
            *v = (2.0 * (*v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0);
        }
    }
    for &ci in PHYSIO_CHANNELS.iter() {
        let x = &mut out.channels[ci];
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let std = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        if std < 1e-8 {
            x.iter_mut().for_each(|v| *v = 0.0);
        } else {
            x.iter_mut().for_each(|v| *v = (*v - mean) / std);
        }
    }
    Ok(out)
}

/// One (condition, target) training/scoring sample.
#[derive(Debug, Clone)]
pub struct WindowPair {
    pub session_id: String,
    pub target_start_s: f64,
    /// [9 x condition frames]
    pub condition: Tensor,
    /// [9 x target frames]
    pub target: Tensor,
    pub label: SetLabel,
}

/// Slice a session into (condition, target) pairs starting every `hop_s`
/// seconds. The pair label comes from annotation overlap with the target
/// window: any overlap counts, candidate wins over maneuver.
pub fn make_window_pairs(
    session: &Session,
    condition_s: usize,
    target_s: usize,
    hop_s: usize,
) -> Vec<WindowPair> {
    let total_s = session.frames() / SAMPLE_RATE;
    let span = condition_s + target_s;
    if total_s < span {
        return Vec::new();
    }
    let cond_f = condition_s * SAMPLE_RATE;
    let target_f = target_s * SAMPLE_RATE;
    let mut pairs = Vec::new();
    let mut start_s = 0usize;
    while start_s + span <= total_s {
        let c0 = start_s * SAMPLE_RATE;
        let t0 = c0 + cond_f;
        let mut cond = Tensor::zeros(&[9, cond_f]);
        let mut target = Tensor::zeros(&[9, target_f]);
        for c in 0..9 {
            cond.data[c * cond_f..(c + 1) * cond_f]
                .copy_from_slice(&session.channels[c][c0..c0 + cond_f]);
            target.data[c * target_f..(c + 1) * target_f]
                .copy_from_slice(&session.channels[c][t0..t0 + target_f]);
        }
        let ts = (start_s + condition_s) as f64;
        let te = ts + target_s as f64;
        let mut label = SetLabel::Normal;
        for a in &session.annotations {
            if a.start_s < te && a.end_s > ts {
                if a.set == SetLabel::Candidate {
                    label = SetLabel::Candidate;
                    break;
                }
                if a.set == SetLabel::Maneuver {
                    label = SetLabel::Maneuver;
                }
            }
        }
        pairs.push(WindowPair {
            session_id: session.id.clone(),
            target_start_s: ts,
            condition: cond,
            target,
            label,
        });
        start_s += hop_s;
    }
    pairs
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<(), DaganError> {
    fs::create_dir_all(dir.join("sessions"))?;
    fs::create_dir_all(dir.join("annotations"))?;
    for session in corpus.sessions.values() {
        let mut csv = String::with_capacity(session.frames() * 80);
        csv.push_str(SESSION_HEADER);
        csv.push('\n');
        for f in 0..session.frames() {
            csv.push_str(&f.to_string());
            for c in 0..9 {
                csv.push(',');
                csv.push_str(&fmt_f(session.channels[c][f]));
            }
            csv.push('\n');
        }
        fs::write(dir.join("sessions").join(format!("{}.csv", session.id)), csv)?;

        let mut ann = String::new();
        ann.push_str(ANNOTATION_HEADER);
        ann.push('\n');
        for a in &session.annotations {
            ann.push_str(&format!(
                "{:.3},{:.3},{},{}\n",
                a.start_s, a.end_s, a.label, a.set
            ));
        }
        fs::write(
            dir.join("annotations").join(format!("{}.csv", session.id)),
            ann,
        )?;
    }
    let mut f = fs::File::create(dir.join("split.json"))?;
    let json = serde_json::to_string_pretty(&corpus.split)
        .map_err(|e| DaganError::Parse(e.to_string()))?;
    f.write_all(json.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn load_session(path: &Path, annotations_path: Option<&Path>) -> Result<Session, DaganError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| DaganError::Parse(format!("{}: empty file", path.display())))?;
    if header != SESSION_HEADER {
        return Err(DaganError::Parse(format!(
            "{}: bad header, expected '{SESSION_HEADER}'",
            path.display()
        )));
    }
    let mut channels: Vec<Vec<f64>> = vec![Vec::new(); 9];
    for (row, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(DaganError::Parse(format!(
                "{}: row {}: expected 10 columns, got {}",
                path.display(),
                row + 1,
                fields.len()
            )));
        }
        let frame: usize = fields[0].parse().map_err(|_| {
            DaganError::Parse(format!(
                "{}: row {}: non-numeric frame index '{}'",
                path.display(),
                row + 1,
                fields[0]
            ))
        })?;
        if frame != row {
            return Err(DaganError::Parse(format!(
                "{}: row {}: non-monotone frame index {frame}",
                path.display(),
                row + 1
            )));
        }
        for (c, field) in fields[1..].iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                DaganError::Parse(format!(
                    "{}: row {}: non-numeric value '{field}' in column {}",
                    path.display(),
                    row + 1,
                    CHANNEL_NAMES[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(DaganError::Parse(format!(
                    "{}: row {}: non-finite value in column {}",
                    path.display(),
                    row + 1,
                    CHANNEL_NAMES[c]
                )));
            }
            channels[c].push(v);
        }
    }
    if channels[0].is_empty() {
        return Err(DaganError::Parse(format!("{}: no rows", path.display())));
    }
    let annotations = match annotations_path {
        Some(p) if p.exists() => load_annotations(p)?,
        _ => Vec::new(),
    };
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("session")
        .to_string();
    Ok(Session {
        id,
        channels,
        annotations,
    })
}

pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>, DaganError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| DaganError::Parse(format!("{}: empty file", path.display())))?;
    if header != ANNOTATION_HEADER {
        return Err(DaganError::Parse(format!(
            "{}: bad header, expected '{ANNOTATION_HEADER}'",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (row, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(DaganError::Parse(format!(
                "{}: row {}: expected 4 columns",
                path.display(),
                row + 1
            )));
        }
        let start_s: f64 = fields[0]
            .parse()
            .map_err(|_| DaganError::Parse(format!("{}: row {}: bad start_s", path.display(), row + 1)))?;
        let end_s: f64 = fields[1]
            .parse()
            .map_err(|_| DaganError::Parse(format!("{}: row {}: bad end_s", path.display(), row + 1)))?;
        if !(start_s >= 0.0 && start_s < end_s) {
            return Err(DaganError::Parse(format!(
                "{}: row {}: invalid interval [{start_s}, {end_s}]",
                path.display(),
                row + 1
            )));
        }
        out.push(Annotation {
            start_s,
            end_s,
            label: fields[2].to_string(),
            set: SetLabel::parse(fields[3])?,
        });
    }
    Ok(out)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus, DaganError> {
    let split: SplitSpec = serde_json::from_str(&fs::read_to_string(dir.join("split.json"))?)
        .map_err(|e| DaganError::Parse(format!("split.json: {e}")))?;
    let mut sessions = BTreeMap::new();
    for id in split
        .train
        .iter()
        .chain(split.dev.iter())
        .chain(split.test.iter())
    {
        let spath = dir.join("sessions").join(format!("{id}.csv"));
        let apath = dir.join("annotations").join(format!("{id}.csv"));
        let session = load_session(&spath, Some(&apath))?;
        sessions.insert(id.clone(), session);
    }
    Ok(Corpus { sessions, split })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            seed: 42,
            train_min: 2,
            dev_min: 2,
            test_min: 2,
            event_rate: 1.0,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&small_spec()).unwrap();
        let b = generate_corpus(&small_spec()).unwrap();
        for (id, sa) in &a.sessions {
            let sb = &b.sessions[id];
            assert_eq!(sa.channels, sb.channels);
            assert_eq!(sa.annotations, sb.annotations);
        }
    }

    #[test]
    fn zero_event_rate_has_no_candidates() {
        let spec = CorpusSpec {
            event_rate: 0.0,
            ..small_spec()
        };
        let c = generate_corpus(&spec).unwrap();
        for s in c.sessions.values() {
            assert!(s.annotations.iter().all(|a| a.set != SetLabel::Candidate));
        }
    }

    #[test]
    fn candidate_count_near_poisson_mean() {
        let spec = CorpusSpec {
            seed: 42,
            train_min: 60,
            dev_min: 2,
            test_min: 2,
            event_rate: 0.5,
        };
        let c = generate_corpus(&spec).unwrap();
        let count: usize = c
            .split
            .train
            .iter()
            .map(|id| {
                c.sessions[id]
                    .annotations
                    .iter()
                    .filter(|a| a.set == SetLabel::Candidate)
                    .count()
            })
            .sum();
        // 30 expected, allow generous Poisson spread
        assert!((12..=50).contains(&count), "candidate count {count}");
    }

    #[test]
    fn roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_corpus(&small_spec()).unwrap();
        write_corpus(dir.path(), &c).unwrap();
        let c2 = load_corpus(dir.path()).unwrap();
        for (id, s) in &c.sessions {
            let s2 = &c2.sessions[id];
            assert_eq!(s.frames(), s2.frames());
            for ch in 0..9 {
                for f in 0..s.frames() {
                    assert!((s.channels[ch][f] - s2.channels[ch][f]).abs() < 1e-6);
                }
            }
            assert_eq!(s.annotations.len(), s2.annotations.len());
        }
    }

    #[test]
    fn byte_identical_rewrite() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_corpus(d1.path(), &generate_corpus(&small_spec()).unwrap()).unwrap();
        write_corpus(d2.path(), &generate_corpus(&small_spec()).unwrap()).unwrap();
        let f1 = std::fs::read(d1.path().join("sessions/train_000.csv")).unwrap();
        let f2 = std::fs::read(d2.path().join("sessions/train_000.csv")).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn bad_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");

        std::fs::write(&p, "frame,speed\n0,1.0\n").unwrap();
        assert!(load_session(&p, None).is_err());

        std::fs::write(
            &p,
            format!("{SESSION_HEADER}\n0,1,1,1,1,1,1,1,1\n"),
        )
        .unwrap();
        let err = load_session(&p, None).unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");

        std::fs::write(
            &p,
            format!("{SESSION_HEADER}\n0,1,1,1,1,1,1,1,1,NaN\n"),
        )
        .unwrap();
        let err = load_session(&p, None).unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");
    }

    #[test]
    fn znormalize_properties() {
        let c = generate_corpus(&small_spec()).unwrap();
        let s = c.sessions.values().next().unwrap();
        let z = znormalize(s).unwrap();
        for &ci in PHYSIO_CHANNELS.iter() {
            let x = &z.channels[ci];
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let std = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((std - 1.0).abs() < 1e-9, "std {std}");
        }
        for &ci in CAN_CHANNELS.iter() {
            assert!(z.channels[ci].iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn znormalize_degenerate_channel() {
        let mut s = generate_corpus(&small_spec())
            .unwrap()
            .sessions
            .values()
            .next()
            .unwrap()
            .clone();
        s.channels[6].iter_mut().for_each(|v| *v = 71.0);
        let z = znormalize(&s).unwrap();
        assert!(z.channels[6].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn znormalize_example_values() {
        let mut s = generate_corpus(&small_spec())
            .unwrap()
            .sessions
            .values()
            .next()
            .unwrap()
            .clone();
        for ch in s.channels.iter_mut() {
            ch.truncate(3);
        }
        s.channels[6] = vec![1.0, 2.0, 3.0];
        s.annotations.clear();
        let z = znormalize(&s).unwrap();
        let e = 1.224744871391589;
        assert!((z.channels[6][0] + e).abs() < 1e-12);
        assert!(z.channels[6][1].abs() < 1e-12);
        assert!((z.channels[6][2] - e).abs() < 1e-12);
    }

    #[test]
    fn window_pair_counts() {
        let mut s = synth_session("w", 72, 0.0, 1);
        s.annotations.clear();
        let pairs = make_window_pairs(&s, 60, 6, 6);
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].target_start_s, 60.0);
        assert_eq!(pairs[1].target_start_s, 66.0);

        let s66 = synth_session("w", 66, 0.0, 1);
        assert_eq!(make_window_pairs(&s66, 60, 6, 6).len(), 1);

        let short = synth_session("w", 65, 0.0, 1);
        assert!(make_window_pairs(&short, 60, 6, 6).is_empty());
    }

    #[test]
    fn tiny_overlap_labels_candidate() {
        let mut s = synth_session("w", 72, 0.0, 1);
        s.annotations = vec![Annotation {
            start_s: 65.5,
            end_s: 66.1,
            label: "avoid_on_road_pedestrian".into(),
            set: SetLabel::Candidate,
        }];
        // second pair's target is [66, 72): overlap is 0.1 s
        let pairs = make_window_pairs(&s, 60, 6, 6);
        assert_eq!(pairs[1].label, SetLabel::Candidate);
    }

    #[test]
    fn candidate_beats_maneuver_on_overlap() {
        let mut s = synth_session("w", 72, 0.0, 1);
        s.annotations = vec![
            Annotation {
                start_s: 60.0,
                end_s: 66.0,
                label: "left_turn".into(),
                set: SetLabel::Maneuver,
            },
            Annotation {
                start_s: 63.0,
                end_s: 64.0,
                label: "traffic_rule_violation".into(),
                set: SetLabel::Candidate,
            },
        ];
        let pairs = make_window_pairs(&s, 60, 6, 6);
        assert_eq!(pairs[0].label, SetLabel::Candidate);
    }

    #[test]
    fn every_candidate_motif_has_annotation_cover() {
        let c = generate_corpus(&small_spec()).unwrap();
        for s in c.sessions.values() {
            for a in &s.annotations {
                assert!(a.start_s < a.end_s && a.end_s <= s.seconds() + 1e-9);
            }
        }
    }
}
