//! Out-of-sample evaluation, win counting and paired t-tests.

use std::fmt::Write as _;

use rayon::prelude::*;
use statrs::function::beta::beta_reg;
use thiserror::Error;

use crate::env::{Env, VIOLATION_REWARD};
use crate::policy::{greedy_action, Policy};
use crate::rng;
use crate::scenario::OutageScenario;
use rand::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("sequences have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 paired samples, got {0}")]
    TooFewSamples(usize),
    #[error("metrics file line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Terminal-step values of one greedy episode plus its summed reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioMetrics {
    pub scenario: usize,
    pub reward: f64,
    pub e_supp: f64,
    pub v_viol: f64,
    pub c_viol: bool,
    pub cumulative_reward: f64,
}

/// How actions are chosen during evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    /// Slot ON iff its probability exceeds 0.5.
    Greedy(&'a Policy),
    /// Each slot ON with probability 1/2; one stream per scenario.
    Random { seed: u64 },
}

/// Runs one episode. Environment or policy failures end the episode with
/// the violation reward.
pub fn run_episode(
    env: &mut Env,
    scenario: &OutageScenario,
    id: usize,
    controller: Controller,
) -> ScenarioMetrics {
    let horizon = env.config().horizon;
    let failed = |cum: f64, steps: usize| ScenarioMetrics {
        scenario: id,
        reward: VIOLATION_REWARD,
        e_supp: 0.0,
        v_viol: 0.0,
        c_viol: true,
        cumulative_reward: cum + VIOLATION_REWARD * (horizon - steps) as f64,
    };
    let mut obs = match env.reset(scenario) {
        Ok(o) => o,
        Err(_) => return failed(0.0, 0),
    };
    let mut random = match controller {
        Controller::Random { seed } => Some(rng::stream(seed, &format!("random-policy-{id}"))),
        Controller::Greedy(_) => None,
    };
    let mut cum = 0.0;
    for steps in 0..horizon {
        let action = match controller {
            Controller::Greedy(p) => match p.evaluate(&obs.policy_input()) {
                Ok(out) => greedy_action(&out.probs),
                Err(_) => return failed(cum, steps),
            },
            Controller::Random { .. } => {
                let r = random.as_mut().expect("random stream");
                (0..env.n_actions()).map(|_| r.gen::<bool>()).collect()
            }
        };
        let step = match env.step(&action) {
            Ok(s) => s,
            Err(_) => return failed(cum, steps),
        };
        cum += step.reward;
        if step.done {
            return ScenarioMetrics {
                scenario: id,
                reward: step.reward,
                e_supp: step.info.e_supp,
                v_viol: step.info.v_viol,
                c_viol: step.info.c_viol,
                cumulative_reward: cum,
            };
        }
        obs = step.observation;
    }
    unreachable!("episode ends at the horizon")
}

/// One record per scenario, in scenario order. `make_env` builds one
/// environment per worker thread.
pub fn evaluate<F>(
    scenarios: &[OutageScenario],
    controller: Controller,
    make_env: F,
) -> Vec<ScenarioMetrics>
where
    F: Fn() -> Env + Sync,
{
    scenarios
        .par_iter()
        .enumerate()
        .map_init(&make_env, |env, (i, s)| run_episode(env, s, i, controller))
        .collect()
}

/// Mean and sample (n-1) standard deviation; the deviation of fewer than
/// two values is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub metric: &'static str,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub const SUMMARY_METRICS: [&str; 4] = ["reward", "e_supp", "v_viol", "cumulative_reward"];

pub fn column(metrics: &[ScenarioMetrics], name: &str) -> Vec<f64> {
    metrics
        .iter()
        .map(|m| match name {
            "reward" => m.reward,
            "e_supp" => m.e_supp,
            "v_viol" => m.v_viol,
            "cumulative_reward" => m.cumulative_reward,
            other => panic!("unknown metric {other}"),
        })
        .collect()
}

pub fn summarize(metrics: &[ScenarioMetrics]) -> Vec<SummaryRow> {
    SUMMARY_METRICS
        .iter()
        .map(|&metric| {
            let (mean, std) = mean_std(&column(metrics, metric));
            SummaryRow {
                metric,
                mean,
                std,
                n: metrics.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WinCounts {
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
}

/// Strict per-scenario comparison; equal values count as ties.
pub fn win_rate(a: &[f64], b: &[f64]) -> Result<WinCounts, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let mut w = WinCounts {
        wins_a: 0,
        wins_b: 0,
        ties: 0,
    };
    for (x, y) in a.iter().zip(b) {
        if x > y {
            w.wins_a += 1;
        } else if y > x {
            w.wins_b += 1;
        } else {
            w.ties += 1;
        }
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    /// Two-sided.
    pub p: f64,
    /// The differences had zero spread; `t` is 0 or infinite.
    pub zero_variance: bool,
}

/// Two-sided paired t-test on `a - b`. The p-value is
/// `I_{df/(df+t^2)}(df/2, 1/2)`, the regularized incomplete beta function.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples(n));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_std(&d);
    let df = n - 1;
    if sd == 0.0 {
        return Ok(if mean == 0.0 {
            TTest {
                t: 0.0,
                df,
                p: 1.0,
                zero_variance: true,
            }
        } else {
            TTest {
                t: mean.signum() * f64::INFINITY,
                df,
                p: 0.0,
                zero_variance: true,
            }
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dff = df as f64;
    let p = beta_reg(dff / 2.0, 0.5, dff / (dff + t * t)).clamp(0.0, 1.0);
    Ok(TTest {
        t,
        df,
        p,
        zero_variance: false,
    })
}

pub const METRICS_HEADER: &str = "scenario,reward,e_supp,v_viol,c_viol,cumulative_reward";

pub fn metrics_csv(metrics: &[ScenarioMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{},{:?}",
            m.scenario,
            m.reward,
            m.e_supp,
            m.v_viol,
            u8::from(m.c_viol),
            m.cumulative_reward
        );
    }
    out
}

pub fn read_metrics_csv(text: &str) -> Result<Vec<ScenarioMetrics>, EvalError> {
    let bad = |line: usize, msg: &str| EvalError::Parse {
        line,
        msg: msg.to_string(),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => return Err(bad(1, "unexpected header")),
    }
    let mut out = Vec::new();
    for (i, row) in lines {
        let ln = i + 1;
        if row.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = row.trim().split(',').collect();
        if f.len() != 6 {
            return Err(bad(ln, "expected 6 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(ln, "bad number"));
        out.push(ScenarioMetrics {
            scenario: f[0].parse().map_err(|_| bad(ln, "bad scenario id"))?,
            reward: num(f[1])?,
            e_supp: num(f[2])?,
            v_viol: num(f[3])?,
            c_viol: match f[4] {
                "0" => false,
                "1" => true,
                _ => return Err(bad(ln, "bad c_viol flag")),
            },
            cumulative_reward: num(f[5])?,
        });
    }
    Ok(out)
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("metric,mean,std,n\n");
    for r in rows {
        let _ = writeln!(out, "{},{:?},{:?},{}", r.metric, r.mean, r.std, r.n);
    }
    out
}

/// Rows matched by scenario id.
pub fn comparison_csv(a: &[ScenarioMetrics], b: &[ScenarioMetrics]) -> Result<String, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let mut out = String::from("scenario,reward_a,reward_b,e_supp_a,e_supp_b,v_viol_a,v_viol_b\n");
    for (x, y) in a.iter().zip(b) {
        debug_assert_eq!(x.scenario, y.scenario);
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?},{:?}",
            x.scenario, x.reward, y.reward, x.e_supp, y.e_supp, x.v_viol, y.v_viol
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub summary_a: Vec<SummaryRow>,
    pub summary_b: Vec<SummaryRow>,
    pub wins: WinCounts,
    /// Reward, energy supplied and voltage violation, in that order.
    pub tests: Vec<(&'static str, TTest)>,
}

pub fn compare(a: &[ScenarioMetrics], b: &[ScenarioMetrics]) -> Result<Comparison, EvalError> {
    let wins = win_rate(&column(a, "reward"), &column(b, "reward"))?;
    let tests = ["reward", "e_supp", "v_viol"]
        .into_iter()
        .map(|m| Ok((m, paired_t_test(&column(a, m), &column(b, m))?)))
        .collect::<Result<_, EvalError>>()?;
    Ok(Comparison {
        summary_a: summarize(a),
        summary_b: summarize(b),
        wins,
        tests,
    })
}

/// Plain-text report: a metric-by-model table of mean ± std, win counts on
/// reward, and the paired t-tests.
pub fn comparison_report(c: &Comparison, name_a: &str, name_b: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<18} {:>24} {:>24}", "metric", name_a, name_b);
    for (ra, rb) in c.summary_a.iter().zip(&c.summary_b) {
        let _ = writeln!(
            out,
            "{:<18} {:>24} {:>24}",
            ra.metric,
            format!("{:.4} ± {:.4}", ra.mean, ra.std),
            format!("{:.4} ± {:.4}", rb.mean, rb.std)
        );
    }
    let n = c.wins.wins_a + c.wins.wins_b + c.wins.ties;
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "wins on reward: {name_a} {}/{n}, {name_b} {}/{n}, ties {}",
        c.wins.wins_a, c.wins.wins_b, c.wins.ties
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "paired t-test ({name_a} - {name_b})");
    for (m, t) in &c.tests {
        let flag = if t.zero_variance {
            "  (zero variance)"
        } else {
            ""
        };
        let _ = writeln!(
            out,
            "{:<8} t={:>10.4} df={:<4} p={:.6}{flag}",
            m, t.t, t.df, t.p
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_examples() {
        let (m, s) = mean_std(&[0.0, 1.0]);
        assert_eq!(m, 0.5);
        assert!((s - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
    }

    #[test]
    fn t_test_oracle() {
        let t = paired_t_test(&[1.0, 2.0, 3.0], &[0.0; 3]).unwrap();
        assert!((t.t - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(t.df, 2);
        // df = 2 closed form: p = 1 - |t| / sqrt(t^2 + 2)
        let closed = 1.0 - t.t.abs() / (t.t * t.t + 2.0).sqrt();
        assert!((t.p - closed).abs() < 1e-10);
        assert!((t.p - 0.0742).abs() < 1e-3);
    }

    #[test]
    fn t_test_df1_closed_form() {
        let t = paired_t_test(&[1.0, 4.0], &[0.0, 0.5]).unwrap();
        let closed = 1.0 - 2.0 / std::f64::consts::PI * t.t.abs().atan();
        assert!((t.p - closed).abs() < 1e-10);
    }

    #[test]
    fn t_test_conventions() {
        let a = [0.3, 0.5, 0.9];
        let same = paired_t_test(&a, &a).unwrap();
        assert_eq!(same.p, 1.0);
        assert!(same.zero_variance);
        let shifted = paired_t_test(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(shifted.p, 0.0);
        assert!(shifted.zero_variance);
        let b = [0.1, 0.6, 0.2];
        let ab = paired_t_test(&a, &b).unwrap();
        let ba = paired_t_test(&b, &a).unwrap();
        assert_eq!(ab.t, -ba.t);
        assert_eq!(ab.p, ba.p);
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn wins() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [0.0, 2.0, 5.0, 1.0];
        assert_eq!(
            win_rate(&a, &b).unwrap(),
            WinCounts {
                wins_a: 2,
                wins_b: 1,
                ties: 1
            }
        );
        assert_eq!(win_rate(&a, &a).unwrap().ties, 4);
        assert!(win_rate(&a, &b[..2]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = vec![
            ScenarioMetrics {
                scenario: 0,
                reward: 0.7,
                e_supp: 0.8,
                v_viol: 0.1,
                c_viol: false,
                cumulative_reward: 5.1,
            },
            ScenarioMetrics {
                scenario: 1,
                reward: -1.0,
                e_supp: 0.3,
                v_viol: 0.0,
                c_viol: true,
                cumulative_reward: -2.0 / 3.0,
            },
        ];
        assert_eq!(read_metrics_csv(&metrics_csv(&m)).unwrap(), m);
        assert_eq!(metrics_csv(&[]), format!("{METRICS_HEADER}\n"));
        assert!(read_metrics_csv(&metrics_csv(&[])).unwrap().is_empty());
    }

    #[test]
    fn single_record_summary() {
        let m = [ScenarioMetrics {
            scenario: 0,
            reward: 0.4,
            e_supp: 0.5,
            v_viol: 0.1,
            c_viol: false,
            cumulative_reward: 2.0,
        }];
        let s = summarize(&m);
        assert_eq!(s[0].mean, 0.4);
        assert_eq!(s[0].std, 0.0);
        assert_eq!(s[0].n, 1);
    }
}
