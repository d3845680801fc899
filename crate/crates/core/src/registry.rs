//! Distributor-side bookkeeping: issue fingerprints, bind them to stamped
//! models, and identify users from decoded bits via nearest-neighbor
//! Hamming matching with a rejection threshold.

use crate::codec::{sample_fingerprint_with, Fingerprint};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::train::Pipeline;
use rand::Rng;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

const RESAMPLE_RETRIES: usize = 64;

/// Default rejection threshold: a quarter of the fingerprint length,
/// sitting between the expected error distance at p <= 0.1 and the d/2
/// chance distance of unrelated fingerprints.
pub fn default_threshold(d_phi: usize) -> u32 {
    (d_phi / 4) as u32
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistryRecord {
    pub user_id: String,
    pub fingerprint: Fingerprint,
    pub model_hash: [u8; 32],
    /// UTC seconds.
    pub issued_at: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MatchResult {
    Match {
        user_id: String,
        distance: u32,
        /// Runner-up distance minus best distance, when a runner-up exists.
        margin: Option<u32>,
    },
    Ambiguous {
        user_ids: Vec<String>,
        distance: u32,
    },
    NoMatch {
        nearest_distance: Option<u32>,
    },
}

#[derive(Clone, Debug, Default)]
pub struct Registry {
    pub records: Vec<RegistryRecord>,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    pub fn d_phi(&self) -> Option<usize> {
        self.records.first().map(|r| r.fingerprint.d_phi())
    }

    fn check_d_phi(&self, d_phi: usize) -> Result<()> {
        if let Some(d) = self.d_phi() {
            if d != d_phi {
                return Err(Error::Registry(format!(
                    "fingerprint length {d_phi} does not match registry d_phi {d}"
                )));
            }
        }
        Ok(())
    }

    /// Issue a fresh fingerprint for `user_id`, resampling on collision
    /// with existing records (bounded retries).
    pub fn register(
        &mut self,
        user_id: &str,
        d_phi: usize,
        model_hash: [u8; 32],
        issued_at: u64,
        seed: u64,
    ) -> Result<&RegistryRecord> {
        if user_id.is_empty() || user_id.contains(char::is_whitespace) {
            return Err(Error::Registry(format!(
                "user id {user_id:?} must be non-empty without whitespace"
            )));
        }
        if self.records.iter().any(|r| r.user_id == user_id) {
            return Err(Error::Registry(format!("user {user_id:?} already registered")));
        }
        self.check_d_phi(d_phi)?;
        let mut rng = rng_for(seed, "registry-issue", &[self.records.len() as u64]);
        for _ in 0..RESAMPLE_RETRIES {
            let phi = sample_fingerprint_with(d_phi, &mut rng)?;
            if !self.records.iter().any(|r| r.fingerprint == phi) {
                self.records.push(RegistryRecord {
                    user_id: user_id.to_string(),
                    fingerprint: phi,
                    model_hash,
                    issued_at,
                });
                return Ok(self.records.last().expect("just pushed"));
            }
        }
        Err(Error::Registry(format!(
            "could not sample a fresh fingerprint after {RESAMPLE_RETRIES} tries; registry effectively full at d_phi {d_phi}"
        )))
    }

    /// Nearest-neighbor Hamming match with rejection threshold `tau`.
    pub fn match_fingerprint(&self, phi_hat: &Fingerprint, tau: u32) -> Result<MatchResult> {
        if self.records.is_empty() {
            return Err(Error::Registry("registry is empty".into()));
        }
        self.check_d_phi(phi_hat.d_phi())?;
        let mut best: Vec<&RegistryRecord> = Vec::new();
        let mut best_d = u32::MAX;
        let mut runner_up = u32::MAX;
        for r in &self.records {
            let d = r.fingerprint.hamming(phi_hat)? as u32;
            if d < best_d {
                runner_up = best_d;
                best_d = d;
                best.clear();
                best.push(r);
            } else if d == best_d {
                best.push(r);
            } else if d < runner_up {
                runner_up = d;
            }
        }
        if best_d > tau {
            return Ok(MatchResult::NoMatch {
                nearest_distance: Some(best_d),
            });
        }
        if best.len() > 1 {
            let mut ids: Vec<String> = best.iter().map(|r| r.user_id.clone()).collect();
            ids.sort();
            return Ok(MatchResult::Ambiguous {
                user_ids: ids,
                distance: best_d,
            });
        }
        Ok(MatchResult::Match {
            user_id: best[0].user_id.clone(),
            distance: best_d,
            margin: (runner_up != u32::MAX).then(|| runner_up - best_d),
        })
    }

    /// Decode an image with the pipeline's fingerprint decoder, then match.
    pub fn identify(&self, image: &Image, pipeline: &Pipeline, tau: u32) -> Result<MatchResult> {
        let phi_hat = pipeline.decode_fingerprint(image)?;
        self.match_fingerprint(&phi_hat, tau)
    }

    /// One record per line: user_id, fingerprint hex, d_phi, model hash
    /// hex, issued_at — tab-separated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let mut hash_hex = String::with_capacity(64);
            for b in r.model_hash {
                let _ = write!(hash_hex, "{b:02x}");
            }
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.user_id,
                r.fingerprint.to_hex(),
                r.fingerprint.d_phi(),
                hash_hex,
                r.issued_at
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut reg = Registry::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = |detail: String| {
                Error::Registry(format!("line {}: {detail}", lineno + 1))
            };
            if fields.len() != 5 {
                return Err(bad(format!("expected 5 tab-separated fields, got {}", fields.len())));
            }
            let d_phi: usize = fields[2]
                .parse()
                .map_err(|_| bad(format!("d_phi {:?} is not an integer", fields[2])))?;
            let fingerprint = Fingerprint::from_hex(fields[1], d_phi)?;
            let hash_hex = fields[3];
            if hash_hex.len() != 64 {
                return Err(bad(format!("model hash must be 64 hex chars, got {}", hash_hex.len())));
            }
            let mut model_hash = [0u8; 32];
            for (i, byte) in model_hash.iter_mut().enumerate() {
                *byte = u8::from_str_radix(&hash_hex[2 * i..2 * i + 2], 16)
                    .map_err(|_| bad(format!("model hash {hash_hex:?} is not hex")))?;
            }
            let issued_at: u64 = fields[4]
                .parse()
                .map_err(|_| bad(format!("issued_at {:?} is not an integer", fields[4])))?;
            let record = RegistryRecord {
                user_id: fields[0].to_string(),
                fingerprint,
                model_hash,
                issued_at,
            };
            if reg.records.iter().any(|r| r.user_id == record.user_id) {
                return Err(bad(format!("duplicate user id {:?}", record.user_id)));
            }
            if let Some(d) = reg.d_phi() {
                if d != d_phi {
                    return Err(bad(format!("d_phi {d_phi} differs from registry d_phi {d}")));
                }
            }
            reg.records.push(record);
        }
        Ok(reg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Registry::from_text(&text)
    }

    /// Rewrite the whole registry (compacting); takes the append lock.
    pub fn save(&self, path: &Path) -> Result<()> {
        let _lock = FileLock::acquire(path)?;
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Append records under an exclusive lock file.
    pub fn append_record(path: &Path, record: &RegistryRecord) -> Result<()> {
        let _lock = FileLock::acquire(path)?;
        let single = Registry {
            records: vec![record.clone()],
        };
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(single.to_text().as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Load, validate, and compact the on-disk registry.
    pub fn rebuild(path: &Path) -> Result<Self> {
        let reg = Registry::load(path)?;
        reg.save(path)?;
        Ok(reg)
    }
}

/// Exclusive lock via atomic lock-file creation with a bounded wait.
struct FileLock {
    path: std::path::PathBuf,
}

impl FileLock {
    fn acquire(target: &Path) -> Result<FileLock> {
        let path = target.with_extension("lock");
        for _ in 0..500 {
            match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(_) => return Ok(FileLock { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    std::thread::sleep(std::time::Duration::from_millis(10));
                }
                Err(e) => return Err(Error::io(path.display().to_string(), e)),
            }
        }
        Err(Error::Registry(format!(
            "could not acquire lock {} within 5s",
            path.display()
        )))
    }
}

impl Drop for FileLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CollisionReport {
    /// Birthday bound C(N,2) / 2^d_phi (capped at 1).
    pub pairwise_collision: f64,
    /// Analytic union-bound estimate of P(some wrong user is at least as
    /// close as the true user to a decoded fingerprint with bit error p).
    pub misattribution_analytic: f64,
    /// Monte-Carlo estimate of the same probability.
    pub misattribution_monte_carlo: f64,
    pub trials: usize,
}

fn binom_pmf(d: usize, p: f64) -> Vec<f64> {
    // iterative binomial PMF, numerically fine for d <= 128
    let mut pmf = vec![0.0f64; d + 1];
    pmf[0] = (1.0 - p).powi(d as i32);
    for k in 1..=d {
        pmf[k] = pmf[k - 1] * ((d - k + 1) as f64 / k as f64) * (p / (1.0 - p));
    }
    pmf
}

fn pack_bits(phi: &Fingerprint) -> u128 {
    phi.bits()
        .iter()
        .enumerate()
        .fold(0u128, |acc, (i, &b)| acc | ((b as u128) << i))
}

/// Analytic + Monte-Carlo estimate of collision and misattribution rates
/// for N users at fingerprint length d_phi and independent bit error rate
/// p. Deterministic per seed.
pub fn collision_report(
    n: usize,
    d_phi: usize,
    p: f64,
    trials: usize,
    seed: u64,
) -> Result<CollisionReport> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("population {n} must be >= 2")));
    }
    if !(0.0..0.5).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "bit error rate {p} outside [0, 0.5)"
        )));
    }
    if d_phi == 0 || d_phi > 128 {
        return Err(Error::InvalidArgument(format!(
            "d_phi {d_phi} outside 1..=128"
        )));
    }
    let pairs = n as f64 * (n as f64 - 1.0) / 2.0;
    let pairwise = (pairs / 2f64.powi(d_phi as i32)).min(1.0);

    // P(random other at distance <= k): CDF of Bin(d, 1/2)
    let chance = binom_pmf(d_phi, 0.5);
    let mut chance_cdf = vec![0.0f64; d_phi + 1];
    let mut acc = 0.0;
    for k in 0..=d_phi {
        acc += chance[k];
        chance_cdf[k] = acc;
    }
    let err_pmf = binom_pmf(d_phi, p);
    let mut analytic = 0.0;
    for k in 0..=d_phi {
        // wrong user at distance <= own distance k (ties count against us)
        analytic += err_pmf[k] * ((n - 1) as f64 * chance_cdf[k]).min(1.0);
    }

    let mut rng = rng_for(seed, "collision-mc", &[]);
    let mask: u128 = if d_phi == 128 {
        u128::MAX
    } else {
        (1u128 << d_phi) - 1
    };
    let mut hits = 0usize;
    for _ in 0..trials {
        let truth: u128 = rng.gen::<u128>() & mask;
        let mut noisy = truth;
        for b in 0..d_phi {
            if rng.gen::<f64>() < p {
                noisy ^= 1u128 << b;
            }
        }
        let own = (noisy ^ truth).count_ones();
        let mut mis = false;
        for _ in 0..n - 1 {
            let other: u128 = rng.gen::<u128>() & mask;
            if (noisy ^ other).count_ones() <= own {
                mis = true;
                break;
            }
        }
        hits += mis as usize;
    }
    Ok(CollisionReport {
        pairwise_collision: pairwise,
        misattribution_analytic: analytic.min(1.0),
        misattribution_monte_carlo: hits as f64 / trials as f64,
        trials,
    })
}

/// Monte-Carlo check of the identification pipeline itself: N registered
/// users, query = true fingerprint with exactly `flips` bits flipped at
/// random distinct positions, matched at threshold tau. Returns
/// (correct-id rate, false no-match rate).
pub fn matching_monte_carlo(
    n: usize,
    d_phi: usize,
    flips: usize,
    tau: u32,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if d_phi == 0 || d_phi > 128 {
        return Err(Error::InvalidArgument(format!(
            "d_phi {d_phi} outside 1..=128"
        )));
    }
    if flips > d_phi {
        return Err(Error::InvalidArgument(format!(
            "flip count {flips} exceeds d_phi {d_phi}"
        )));
    }
    let mut rng = rng_for(seed, "matching-mc", &[]);
    let mask: u128 = if d_phi == 128 {
        u128::MAX
    } else {
        (1u128 << d_phi) - 1
    };
    let users: Vec<u128> = (0..n).map(|_| rng.gen::<u128>() & mask).collect();
    let mut correct = 0usize;
    let mut no_match = 0usize;
    for t in 0..trials {
        let target = t % n;
        let mut noisy = users[target];
        for pos in rand::seq::index::sample(&mut rng, d_phi, flips) {
            noisy ^= 1u128 << pos;
        }
        let mut best_d = u32::MAX;
        let mut best_i = usize::MAX;
        let mut tied = false;
        for (i, u) in users.iter().enumerate() {
            let d = (noisy ^ u).count_ones();
            if d < best_d {
                best_d = d;
                best_i = i;
                tied = false;
            } else if d == best_d {
                tied = true;
            }
        }
        if best_d > tau {
            no_match += 1;
        } else if !tied && best_i == target {
            correct += 1;
        }
    }
    Ok((
        correct as f64 / trials as f64,
        no_match as f64 / trials as f64,
    ))
}

/// Fast packed-bitset match rate of arbitrary queries against a packed
/// user set (used for the unfingerprinted-image control).
pub fn pack_fingerprint(phi: &Fingerprint) -> u128 {
    pack_bits(phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::sample_fingerprint;

    fn reg_with(n: usize, d_phi: usize) -> Registry {
        let mut reg = Registry::new();
        for i in 0..n {
            reg.register(&format!("user{i}"), d_phi, [i as u8; 32], 1_700_000_000 + i as u64, 42)
                .unwrap();
        }
        reg
    }

    #[test]
    fn register_issues_unique_fingerprints_and_rejects_duplicates() {
        let mut reg = reg_with(50, 16);
        for i in 0..reg.records.len() {
            for j in i + 1..reg.records.len() {
                assert_ne!(reg.records[i].fingerprint, reg.records[j].fingerprint);
            }
        }
        let err = reg.register("user0", 16, [0; 32], 0, 1).unwrap_err();
        assert!(err.to_string().contains("already registered"));
        // d_phi mismatch rejected
        assert!(reg.register("fresh", 32, [0; 32], 0, 1).is_err());
    }

    #[test]
    fn exact_match_distance_zero_and_threshold_rule() {
        let reg = reg_with(8, 32);
        let phi = reg.records[3].fingerprint.clone();
        match reg.match_fingerprint(&phi, default_threshold(32)).unwrap() {
            MatchResult::Match { user_id, distance, .. } => {
                assert_eq!(user_id, "user3");
                assert_eq!(distance, 0);
            }
            other => panic!("{other:?}"),
        }
        // distance tau+1 from everything -> no match
        let mut reg2 = Registry::new();
        reg2.records.push(RegistryRecord {
            user_id: "only".into(),
            fingerprint: Fingerprint::from_bits(vec![0; 32]).unwrap(),
            model_hash: [0; 32],
            issued_at: 0,
        });
        let tau = default_threshold(32); // 8
        let mut bits = vec![0u8; 32];
        for b in bits.iter_mut().take(tau as usize + 1) {
            *b = 1;
        }
        let query = Fingerprint::from_bits(bits).unwrap();
        match reg2.match_fingerprint(&query, tau).unwrap() {
            MatchResult::NoMatch { nearest_distance } => {
                assert_eq!(nearest_distance, Some(tau + 1));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ties_are_ambiguous_regardless_of_order() {
        let a = Fingerprint::from_bits(vec![0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        let b = Fingerprint::from_bits(vec![1, 1, 0, 0, 0, 0, 0, 0]).unwrap();
        let query = Fingerprint::from_bits(vec![1, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        let rec = |id: &str, phi: &Fingerprint| RegistryRecord {
            user_id: id.into(),
            fingerprint: phi.clone(),
            model_hash: [0; 32],
            issued_at: 0,
        };
        for order in [vec![("x", &a), ("y", &b)], vec![("y", &b), ("x", &a)]] {
            let reg = Registry {
                records: order.iter().map(|(id, phi)| rec(id, phi)).collect(),
            };
            match reg.match_fingerprint(&query, 4).unwrap() {
                MatchResult::Ambiguous { user_ids, distance } => {
                    assert_eq!(user_ids, vec!["x".to_string(), "y".to_string()]);
                    assert_eq!(distance, 1);
                }
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn text_roundtrip_and_validation() {
        let reg = reg_with(5, 32);
        let text = reg.to_text();
        let back = Registry::from_text(&text).unwrap();
        assert_eq!(back.records, reg.records);

        assert!(Registry::from_text("onlyonefield\n").is_err());
        let dup = format!("{}{}", text.lines().next().unwrap(), "\n").repeat(2);
        assert!(Registry::from_text(&dup).is_err());
    }

    #[test]
    fn file_append_and_rebuild() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.txt");
        let reg = reg_with(3, 16);
        for r in &reg.records {
            Registry::append_record(&path, r).unwrap();
        }
        let loaded = Registry::rebuild(&path).unwrap();
        assert_eq!(loaded.records, reg.records);
        assert!(!path.with_extension("lock").exists(), "lock not released");
    }

    #[test]
    fn match_with_full_threshold_always_finds_self() {
        let reg = reg_with(20, 16);
        for r in &reg.records {
            match reg.match_fingerprint(&r.fingerprint, 16).unwrap() {
                MatchResult::Match { user_id, distance, .. } => {
                    assert_eq!(&user_id, &r.user_id);
                    assert_eq!(distance, 0);
                }
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn collision_report_closed_forms() {
        // N=2, d=32 -> pairwise exactly 2^-32
        let r = collision_report(2, 32, 0.1, 1000, 1).unwrap();
        assert!((r.pairwise_collision - 2f64.powi(-32)).abs() < 1e-18);
        // pigeonhole regime
        let r = collision_report(1 << 20, 16, 0.0, 10, 1).unwrap();
        assert_eq!(r.pairwise_collision, 1.0);
        // analytic within 2x of monte-carlo at the spec's point
        let r = collision_report(1024, 32, 0.1, 20_000, 7).unwrap();
        let (a, m) = (r.misattribution_analytic, r.misattribution_monte_carlo);
        assert!(a <= 2.0 * m + 1e-3 && m <= 2.0 * a + 1e-3, "a={a} m={m}");
    }

    #[test]
    fn monte_carlo_matching_meets_headline_rates() {
        // 10% bit error rate: exactly floor(0.1 * 32) = 3 flipped bits
        let (correct, no_match) =
            matching_monte_carlo(1024, 32, 3, default_threshold(32), 20_000, 3).unwrap();
        assert!(correct >= 0.99, "correct {correct}");
        assert!(no_match <= 0.01, "no_match {no_match}");
    }

    #[test]
    fn registration_determinism() {
        let a = reg_with(10, 32);
        let b = reg_with(10, 32);
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.fingerprint, y.fingerprint);
        }
        let phi = sample_fingerprint(32, 5).unwrap();
        assert_eq!(pack_fingerprint(&phi), pack_fingerprint(&phi));
    }
}
