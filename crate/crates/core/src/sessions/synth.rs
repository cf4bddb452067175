use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};

use super::{Event, Session};
use crate::error::{Error, Result};
use crate::par::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    TmallLike,
    YoochooseLike,
    PlantedRule,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tmall_like" => Ok(Preset::TmallLike),
            "yoochoose_like" => Ok(Preset::YoochooseLike),
            "planted_rule" => Ok(Preset::PlantedRule),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

struct Marginals {
    prefix: &'static str,
    behaviors: &'static [(&'static str, f64)],
    mean_len: f64,
}

const TMALL: Marginals = Marginals {
    prefix: "t",
    behaviors: &[("click", 0.903), ("purchase", 0.036), ("favorite", 0.061)],
    mean_len: 6.73,
};

const YOOCHOOSE: Marginals = Marginals {
    prefix: "y",
    behaviors: &[("click", 0.951), ("purchase", 0.049)],
    mean_len: 6.18,
};

/// Shortest generated session; lengths are `MIN_LEN + Poisson(mean - MIN_LEN)`.
const MIN_LEN: usize = 3;

/// Corpus with a learnable signal.
///
/// Items are partitioned into `categories` equal blocks. A session is a
/// sequence of click runs: once the current run holds at least two
/// consecutive clicks from one category, the next event is a purchase of the
/// run's first item with probability `p_purchase`, otherwise a uniform click.
/// After a single-click run, the next click stays in the run's category with
/// probability `p_stay`; all other clicks are uniform over the catalogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRule {
    pub categories: usize,
    pub items_per_category: usize,
    pub p_stay: f64,
    pub p_purchase: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for PlantedRule {
    fn default() -> Self {
        PlantedRule {
            categories: 10,
            items_per_category: 20,
            p_stay: 0.6,
            p_purchase: 0.9,
            min_len: 4,
            max_len: 12,
        }
    }
}

impl PlantedRule {
    pub fn n_items(&self) -> usize {
        self.categories * self.items_per_category
    }

    pub fn category(&self, item: usize) -> usize {
        item / self.items_per_category
    }

    pub fn item_id(item: usize) -> String {
        format!("p{item}")
    }

    fn session(&self, rng: &mut ChaCha8Rng) -> Vec<(usize, bool)> {
        let n = self.n_items();
        let len = rng.random_range(self.min_len..=self.max_len);
        let mut events: Vec<(usize, bool)> = Vec::with_capacity(len);
        // (first item, category, length) of the current click run
        let mut run: Option<(usize, usize, usize)> = None;
        while events.len() < len {
            let last_click = events.last().filter(|e| !e.1).map(|e| e.0);
            if let Some((first, _, run_len)) = run {
                if run_len >= 2 && rng.random_bool(self.p_purchase) {
                    events.push((first, true));
                    run = None;
                    continue;
                }
            }
            let item = match run {
                Some((_, cat, 1)) if rng.random_bool(self.p_stay) => {
                    let base = cat * self.items_per_category;
                    loop {
                        let it = base + rng.random_range(0..self.items_per_category);
                        if Some(it) != last_click {
                            break it;
                        }
                    }
                }
                _ => loop {
                    let it = rng.random_range(0..n);
                    if Some(it) != last_click {
                        break it;
                    }
                },
            };
            let cat = self.category(item);
            run = match run {
                Some((first, c, k)) if c == cat => Some((first, c, k + 1)),
                _ => Some((item, cat, 1)),
            };
            events.push((item, false));
        }
        events
    }
}

/// Deterministic synthetic corpus. Session `i` draws from its own ChaCha
/// stream, so output does not depend on thread scheduling.
pub fn generate_synthetic(preset: Preset, n_sessions: usize, seed: u64) -> Result<Vec<Session>> {
    if n_sessions == 0 {
        return Err(Error::Config("n_sessions must be at least 1".into()));
    }
    let rng_for = |i: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        rng
    };
    let sessions = match preset {
        Preset::PlantedRule => {
            let rule = PlantedRule::default();
            Execution::Parallel.map_range(n_sessions, |i| {
                let events = rule.session(&mut rng_for(i));
                to_session(i, "p", events.into_iter().map(|(item, buy)| {
                    (PlantedRule::item_id(item), if buy { "purchase" } else { "click" })
                }))
            })
        }
        Preset::TmallLike | Preset::YoochooseLike => {
            let m = if preset == Preset::TmallLike { &TMALL } else { &YOOCHOOSE };
            let n_items = (n_sessions / 4).max(30);
            // Zipf-like popularity
            let popularity =
                WeightedIndex::new((0..n_items).map(|r| 1.0 / ((r + 1) as f64).powf(0.8))).unwrap();
            let behavior = WeightedIndex::new(m.behaviors.iter().map(|b| b.1)).unwrap();
            let extra = Poisson::new(m.mean_len - MIN_LEN as f64).unwrap();
            Execution::Parallel.map_range(n_sessions, |i| {
                let mut rng = rng_for(i);
                let len = MIN_LEN + extra.sample(&mut rng) as usize;
                let mut events: Vec<(usize, usize)> = Vec::with_capacity(len);
                while events.len() < len {
                    let b = behavior.sample(&mut rng);
                    let item = loop {
                        let it = popularity.sample(&mut rng);
                        if events.last() != Some(&(it, b)) {
                            break it;
                        }
                    };
                    events.push((item, b));
                }
                to_session(
                    i,
                    m.prefix,
                    events
                        .into_iter()
                        .map(|(it, b)| (format!("{}{it}", m.prefix), m.behaviors[b].0)),
                )
            })
        }
    };
    Ok(sessions)
}

fn to_session<'a>(i: usize, prefix: &str, events: impl Iterator<Item = (String, &'a str)>) -> Session {
    Session {
        session_id: format!("{prefix}s{i}"),
        events: events
            .enumerate()
            .map(|(t, (item, b))| Event::new(item, b, (i * 1000 + t) as i64))
            .collect(),
    }
}
