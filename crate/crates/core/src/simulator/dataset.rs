//! Scenario generation, train/val/test assembly, and min-max scaling.
//!
//! Every scenario is self-seeded from the master seed and its id, so the
//! build produces identical bytes whether it runs serially or fans out
//! across workers. Damage severities follow a folded Gaussian clipped to 1,
//! which concentrates the dataset on healthy and low-severity states;
//! environments are uniform over their physical boxes.
//!
//! The scaler is fitted on the train split only and applied everywhere,
//! keeping validation and test leakage-free. Environment components are not
//! part of the scaler: they rescale by their fixed physical ranges.

use crate::simulator::features::{extract_features, feature_vector};
use crate::simulator::response::{simulate_response, DamageState, Environment, SimulatorSpec};
use crate::{derive_seed2, Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Folded-Gaussian scale for severity sampling.
const DAMAGE_SCALE: f64 = 0.25;

/// Seed salts separating the independent random streams of a build.
const SALT_SCENARIO: u64 = 0x5ce7;
const SALT_SIMULATION: u64 = 0x51f7;
const SALT_SPLIT: u64 = 0x5b11;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::parameter(format!("unknown split tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub id: usize,
    pub split: Split,
    pub env: Environment,
    pub damage: DamageState,
    /// Raw (unscaled) features, 5 per monitored DOF.
    pub features: Vec<f64>,
}

/// Severity draw: |N(0, 0.25^2)| clipped at 1.
pub fn sample_damage<R: Rng>(rng: &mut R) -> DamageState {
    let mut draw = || {
        let g: f64 = rng.sample(rand_distr::StandardNormal);
        (DAMAGE_SCALE * g).abs().min(1.0)
    };
    let z1 = draw();
    let z2 = draw();
    DamageState::new(z1, z2).expect("folded draw is in [0,1] by construction")
}

/// Uniform draw over the physical environment box.
pub fn sample_environment<R: Rng>(rng: &mut R) -> Environment {
    let u = |rng: &mut R, (lo, hi): (f64, f64)| rng.gen_range(lo..hi);
    let hs = u(rng, Environment::HS_RANGE);
    let tp = u(rng, Environment::TP_RANGE);
    let wv = u(rng, Environment::WV_RANGE);
    Environment::new(hs, tp, wv).expect("uniform draw is inside the box")
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxScaler {
    mins: Vec<f64>,
    maxs: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut mins: Vec<f64> = Vec::new();
        let mut maxs: Vec<f64> = Vec::new();
        let mut seen = 0usize;
        for row in rows {
            if seen == 0 {
                mins = row.to_vec();
                maxs = row.to_vec();
            } else {
                if row.len() != mins.len() {
                    return Err(Error::arity("scaler row length", mins.len(), row.len()));
                }
                for (i, &v) in row.iter().enumerate() {
                    mins[i] = mins[i].min(v);
                    maxs[i] = maxs[i].max(v);
                }
            }
            seen += 1;
        }
        if seen == 0 {
            return Err(Error::parameter("scaler fit needs at least one row"));
        }
        Ok(MinMaxScaler { mins, maxs })
    }

    pub fn n_features(&self) -> usize {
        self.mins.len()
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.mins.len() {
            return Err(Error::arity("scaler input length", self.mins.len(), v.len()));
        }
        Ok(())
    }

    /// (x - min) / (max - min); degenerate columns map to 0.
    pub fn transform(&self, raw: &[f64]) -> Result<Vec<f64>> {
        self.check_len(raw)?;
        Ok(raw
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let range = self.maxs[i] - self.mins[i];
                if range > 0.0 {
                    (x - self.mins[i]) / range
                } else {
                    0.0
                }
            })
            .collect())
    }

    pub fn inverse(&self, scaled: &[f64]) -> Result<Vec<f64>> {
        self.check_len(scaled)?;
        Ok(scaled
            .iter()
            .enumerate()
            .map(|(i, &s)| self.mins[i] + s * (self.maxs[i] - self.mins[i]))
            .collect())
    }

    /// Sidecar form: an object keyed by feature index, each entry holding
    /// the fitted min and max.
    pub fn to_json_string(&self) -> String {
        let mut map = serde_json::Map::new();
        for i in 0..self.mins.len() {
            let mut entry = serde_json::Map::new();
            entry.insert("min".into(), serde_json::json!(self.mins[i]));
            entry.insert("max".into(), serde_json::json!(self.maxs[i]));
            map.insert(i.to_string(), serde_json::Value::Object(entry));
        }
        serde_json::to_string_pretty(&serde_json::Value::Object(map))
            .expect("scaler json serialization cannot fail")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        let obj = v
            .as_object()
            .ok_or_else(|| Error::parameter("scaler json must be an object"))?;
        let n = obj.len();
        let mut mins = vec![0.0; n];
        let mut maxs = vec![0.0; n];
        for i in 0..n {
            let entry = obj
                .get(&i.to_string())
                .and_then(|e| e.as_object())
                .ok_or_else(|| Error::parameter(format!("scaler json missing feature {i}")))?;
            let get = |k: &str| -> Result<f64> {
                entry
                    .get(k)
                    .and_then(|x| x.as_f64())
                    .ok_or_else(|| Error::parameter(format!("scaler feature {i} missing {k}")))
            };
            mins[i] = get("min")?;
            maxs[i] = get("max")?;
        }
        Ok(MinMaxScaler { mins, maxs })
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    scenarios: Vec<Scenario>,
    scaler: MinMaxScaler,
    n_dof: usize,
}

impl Dataset {
    pub fn scenarios(&self) -> &[Scenario] {
        &self.scenarios
    }

    pub fn split(&self, s: Split) -> impl Iterator<Item = &Scenario> {
        self.scenarios.iter().filter(move |sc| sc.split == s)
    }

    pub fn split_counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for sc in &self.scenarios {
            match sc.split {
                Split::Train => c.0 += 1,
                Split::Val => c.1 += 1,
                Split::Test => c.2 += 1,
            }
        }
        c
    }

    pub fn scaler(&self) -> &MinMaxScaler {
        &self.scaler
    }

    pub fn n_dof(&self) -> usize {
        self.n_dof
    }

    pub fn n_features(&self) -> usize {
        5 * self.n_dof
    }

    pub fn scaled_features(&self, sc: &Scenario) -> Result<Vec<f64>> {
        self.scaler.transform(&sc.features)
    }

    pub fn to_csv_string(&self) -> String {
        let n_feat = self.n_features();
        let mut out = String::from("scenario_id,split");
        for col in ["hs", "tp", "wv", "z1", "z2"] {
            out.push(',');
            out.push_str(col);
        }
        for i in 0..n_feat {
            out.push_str(&format!(",m_{i}"));
        }
        out.push('\n');
        for sc in &self.scenarios {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}",
                sc.id,
                sc.split.as_str(),
                sc.env.hs(),
                sc.env.tp(),
                sc.env.wv(),
                sc.damage.z1(),
                sc.damage.z2()
            ));
            for &f in &sc.features {
                out.push_str(&format!(",{f}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv_str(csv: &str, scaler_json: &str) -> Result<Dataset> {
        let scaler = MinMaxScaler::from_json_str(scaler_json)?;
        let mut lines = csv.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parameter("dataset csv is empty"))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 8 || cols[0] != "scenario_id" || cols[1] != "split" {
            return Err(Error::parameter("dataset csv header malformed"));
        }
        let n_feat = cols.len() - 7;
        if n_feat % 5 != 0 {
            return Err(Error::parameter(format!(
                "feature column count {n_feat} is not a multiple of 5"
            )));
        }
        if scaler.n_features() != n_feat {
            return Err(Error::Incompatible(format!(
                "scaler covers {} features but csv has {n_feat}",
                scaler.n_features()
            )));
        }
        let mut scenarios = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != cols.len() {
                return Err(Error::parameter(format!(
                    "dataset csv row {} has {} fields, expected {}",
                    lineno + 2,
                    parts.len(),
                    cols.len()
                )));
            }
            let pf = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| Error::parameter(format!("bad number {s:?} in csv row {}", lineno + 2)))
            };
            let id: usize = parts[0]
                .parse()
                .map_err(|_| Error::parameter(format!("bad scenario id {:?}", parts[0])))?;
            let split = Split::parse(parts[1])?;
            let env = Environment::new(pf(parts[2])?, pf(parts[3])?, pf(parts[4])?)?;
            let damage = DamageState::new(pf(parts[5])?, pf(parts[6])?)?;
            let features = parts[7..]
                .iter()
                .map(|s| pf(s))
                .collect::<Result<Vec<f64>>>()?;
            scenarios.push(Scenario { id, split, env, damage, features });
        }
        Ok(Dataset {
            scenarios,
            scaler,
            n_dof: n_feat / 5,
        })
    }
}

/// Generate `n` scenarios, simulate and featurize them in parallel, split
/// 70/20/10 by shuffled index, and fit the scaler on the train split.
pub fn build_dataset(
    n: usize,
    seed: u64,
    spec: &SimulatorSpec,
    f_lim_hz: f64,
) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::parameter(format!("dataset size must be >= 10, got {n}")));
    }
    let sample_rate = 1.0 / spec.dt_s;

    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed2(seed, SALT_SPLIT, 0));
    order.shuffle(&mut split_rng);
    let n_train = n * 7 / 10;
    let n_val = n * 2 / 10;
    let mut split_of = vec![Split::Test; n];
    for (rank, &id) in order.iter().enumerate() {
        split_of[id] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let scenarios: Vec<Scenario> = (0..n)
        .into_par_iter()
        .map(|id| -> Result<Scenario> {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed2(seed, SALT_SCENARIO, id as u64));
            let env = sample_environment(&mut rng);
            let damage = sample_damage(&mut rng);
            let sim_seed = derive_seed2(seed, SALT_SIMULATION, id as u64);
            let series = simulate_response(&damage, &env, sim_seed, spec)?;
            let per_dof = series
                .iter()
                .map(|s| extract_features(s, sample_rate, f_lim_hz))
                .collect::<Result<Vec<_>>>()?;
            Ok(Scenario {
                id,
                split: split_of[id],
                env,
                damage,
                features: feature_vector(&per_dof),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let scaler = MinMaxScaler::fit(
        scenarios
            .iter()
            .filter(|sc| sc.split == Split::Train)
            .map(|sc| sc.features.as_slice()),
    )?;
    Ok(Dataset {
        scenarios,
        scaler,
        n_dof: spec.n_dof,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::features::F_LIM_DEFAULT_HZ;

    fn quick_spec() -> SimulatorSpec {
        SimulatorSpec {
            n_dof: 3,
            duration_s: 300.0,
            dt_s: 0.5,
            noise_frac: 0.02,
        }
    }

    #[test]
    fn split_arithmetic() {
        let ds = build_dataset(100, 9, &quick_spec(), F_LIM_DEFAULT_HZ).unwrap();
        assert_eq!(ds.split_counts(), (70, 20, 10));
        let ds = build_dataset(15, 9, &quick_spec(), F_LIM_DEFAULT_HZ).unwrap();
        assert_eq!(ds.split_counts(), (10, 3, 2));
        assert!(build_dataset(9, 9, &quick_spec(), F_LIM_DEFAULT_HZ).is_err());
    }

    #[test]
    fn scaled_train_hits_unit_interval_exactly() {
        let ds = build_dataset(60, 11, &quick_spec(), F_LIM_DEFAULT_HZ).unwrap();
        let rows: Vec<Vec<f64>> = ds
            .split(Split::Train)
            .map(|sc| ds.scaled_features(sc).unwrap())
            .collect();
        let n_feat = ds.n_features();
        let mut informative = 0;
        for col in 0..n_feat {
            let vals: Vec<f64> = rows.iter().map(|r| r[col]).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                assert_eq!(lo, 0.0, "column {col}");
                assert_eq!(hi, 1.0, "column {col}");
                informative += 1;
            }
            assert!(vals.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(informative >= n_feat - 3, "only {informative} informative columns");
    }

    #[test]
    fn scaler_round_trip() {
        let ds = build_dataset(30, 12, &quick_spec(), F_LIM_DEFAULT_HZ).unwrap();
        for sc in ds.scenarios() {
            let scaled = ds.scaled_features(sc).unwrap();
            let back = ds.scaler().inverse(&scaled).unwrap();
            for (a, b) in back.iter().zip(&sc.features) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn scaler_json_round_trip() {
        let ds = build_dataset(20, 13, &quick_spec(), F_LIM_DEFAULT_HZ).unwrap();
        let json = ds.scaler().to_json_string();
        let back = MinMaxScaler::from_json_str(&json).unwrap();
        assert_eq!(*ds.scaler(), back);
    }

    #[test]
    fn build_is_bit_reproducible() {
        let a = build_dataset(25, 77, &quick_spec(), F_LIM_DEFAULT_HZ).unwrap();
        let b = build_dataset(25, 77, &quick_spec(), F_LIM_DEFAULT_HZ).unwrap();
        assert_eq!(a.to_csv_string(), b.to_csv_string());
        assert_eq!(a.scaler().to_json_string(), b.scaler().to_json_string());
        let c = build_dataset(25, 78, &quick_spec(), F_LIM_DEFAULT_HZ).unwrap();
        assert_ne!(a.to_csv_string(), c.to_csv_string());
    }

    #[test]
    fn csv_round_trip_preserves_everything() {
        let ds = build_dataset(20, 5, &quick_spec(), F_LIM_DEFAULT_HZ).unwrap();
        let back = Dataset::from_csv_str(&ds.to_csv_string(), &ds.scaler().to_json_string()).unwrap();
        assert_eq!(back.scenarios().len(), 20);
        assert_eq!(back.n_dof(), 3);
        for (a, b) in ds.scenarios().iter().zip(back.scenarios()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.split, b.split);
            assert_eq!(a.env, b.env);
            assert_eq!(a.damage, b.damage);
            assert_eq!(a.features, b.features);
        }
        // Display-formatted floats parse back to identical bits, so a second
        // serialization is byte-identical.
        assert_eq!(ds.to_csv_string(), back.to_csv_string());
    }

    #[test]
    fn damage_sampling_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 100_000;
        let mut z1: Vec<f64> = Vec::with_capacity(n);
        let mut clipped = 0usize;
        for _ in 0..n {
            let d = sample_damage(&mut rng);
            assert!((0.0..=1.0).contains(&d.z1()) && (0.0..=1.0).contains(&d.z2()));
            if d.z1() == 1.0 || d.z2() == 1.0 {
                clipped += 1;
            }
            z1.push(d.z1());
        }
        z1.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = z1[n / 2];
        // Folded-Gaussian median is 0.25 * Phi^-1(0.75) ~ 0.169.
        assert!(median < 0.25, "median = {median}");
        assert!((median - 0.1686).abs() < 0.01, "median = {median}");
        assert!((clipped as f64 / n as f64) < 0.01);
    }

    #[test]
    fn damage_sensitivity_is_monotone() {
        // Averaged over environments: f1 falls and the surge-analog mean
        // rises as anchoring severity grows.
        let spec = SimulatorSpec {
            n_dof: 1,
            duration_s: 900.0,
            dt_s: 0.1,
            noise_frac: 0.02,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let envs: Vec<Environment> = (0..50).map(|_| sample_environment(&mut rng)).collect();
        let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
        let mut mean_f1 = Vec::new();
        let mut mean_offset = Vec::new();
        for (gi, &z2) in grid.iter().enumerate() {
            let z = DamageState::new(0.3, z2).unwrap();
            let (mut f1_acc, mut mean_acc) = (0.0, 0.0);
            for (ei, env) in envs.iter().enumerate() {
                let series = simulate_response(&z, env, (gi * 100 + ei) as u64, &spec).unwrap();
                let f = extract_features(&series[0], 10.0, F_LIM_DEFAULT_HZ).unwrap();
                f1_acc += f.f1;
                mean_acc += f.mean;
            }
            mean_f1.push(f1_acc / envs.len() as f64);
            mean_offset.push(mean_acc / envs.len() as f64);
        }
        for i in 1..grid.len() {
            assert!(
                mean_f1[i] < mean_f1[i - 1],
                "f1 not decreasing: {mean_f1:?}"
            );
            assert!(
                mean_offset[i] > mean_offset[i - 1],
                "mean not increasing: {mean_offset:?}"
            );
        }
    }
}
