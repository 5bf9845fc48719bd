use std::collections::BTreeMap;

use super::{layout_flops, ComputeError, ItemCost};
use crate::backbone::{ExecLayout, ExecRow, ModelConfig};
use crate::numerics::FlopCounter;

/// How branch forwards of one step are batched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Packing {
    /// One of the four strategies.
    Strategy(u8),
    /// Lowest latency proxy among the feasible strategies.
    Auto,
}

impl std::str::FromStr for Packing {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "auto" => Ok(Packing::Auto),
            _ => match s.parse::<u8>() {
                Ok(k @ 1..=4) => Ok(Packing::Strategy(k)),
                _ => Err(format!("packing must be 1..4 or auto, got {s:?}")),
            },
        }
    }
}

/// Launch overhead `a` and per-row work weight `b` of the latency proxy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyModel {
    pub launch: f64,
    pub work: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self { launch: 1e7, work: 1.0 }
    }
}

/// A realized arrangement of sequences into batch rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PackingStrategy {
    pub id: u8,
    pub description: &'static str,
    pub lens: Vec<usize>,
    pub rows: Vec<ExecRow>,
    pub pad_linears: bool,
    pub dense_attention: bool,
    pub launches: usize,
}

impl PackingStrategy {
    pub fn layout(&self) -> ExecLayout {
        ExecLayout { rows: self.rows.clone(), pad_linears: self.pad_linears, dense_attention: self.dense_attention }
    }

    pub fn flops(&self, cfg: &ModelConfig, items: &[ItemCost]) -> FlopCounter {
        layout_flops(cfg, items, &self.layout())
    }

    /// `a * launches + b * depth * sum over rows of (len^2 d + len d^2)`.
    pub fn latency_proxy(&self, d: usize, depth: usize, m: &LatencyModel) -> f64 {
        let d = d as f64;
        let work: f64 = self.rows.iter().map(|r| (r.len * r.len) as f64 * d + r.len as f64 * d * d).sum();
        m.launch * self.launches as f64 + m.work * depth as f64 * work
    }

    pub fn padding(&self) -> usize {
        self.rows.iter().map(|r| r.len - r.items.iter().map(|&i| self.lens[i]).sum::<usize>()).sum()
    }
}

const DESCRIPTIONS: [&str; 4] = [
    "pad every sequence to the longest length, one batch",
    "one homogeneous batch per sequence length",
    "one mixed batch, rows padded to the longest length under masked attention",
    "short sequences concatenated into longest-length rows with block-diagonal masks",
];

/// Arrange `(sequence length, count)` requests; items are numbered request by request.
pub fn pack(requests: &[(usize, usize)], strategy: u8) -> Result<PackingStrategy, ComputeError> {
    let lens: Vec<usize> = requests.iter().flat_map(|&(n, k)| std::iter::repeat_n(n, k)).collect();
    pack_items(&lens, strategy)
}

/// Arrange items with the given sequence lengths.
pub fn pack_items(lens: &[usize], strategy: u8) -> Result<PackingStrategy, ComputeError> {
    if !(1..=4).contains(&strategy) {
        return Err(ComputeError::UnknownStrategy(strategy));
    }
    if lens.is_empty() || lens.contains(&0) {
        return Err(ComputeError::Empty);
    }
    let n_max = *lens.iter().max().expect("non-empty");
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &n) in lens.iter().enumerate() {
        by_len.entry(n).or_default().push(i);
    }
    let own_rows = |len: Option<usize>| -> Vec<ExecRow> {
        lens.iter().enumerate().map(|(i, &n)| ExecRow { items: vec![i], len: len.unwrap_or(n) }).collect()
    };
    let (rows, pad_linears, dense_attention, launches) = match strategy {
        1 => (own_rows(Some(n_max)), true, true, 1),
        2 => {
            let rows = by_len.values().rev().flatten().map(|&i| ExecRow { items: vec![i], len: lens[i] }).collect();
            (rows, false, false, by_len.len())
        }
        3 => (own_rows(Some(n_max)), false, true, 1),
        _ => {
            for (&n, members) in &by_len {
                let ratio = n_max / n;
                if members.len() < ratio {
                    return Err(ComputeError::Infeasible { len: n, count: members.len(), ratio });
                }
            }
            let mut rows: Vec<ExecRow> = Vec::new();
            // longest first, each into the first row with room
            for (&n, members) in by_len.iter().rev() {
                for &i in members {
                    let fit = rows.iter_mut().find(|r| r.items.iter().map(|&j| lens[j]).sum::<usize>() + n <= n_max);
                    match fit {
                        Some(r) => r.items.push(i),
                        None => rows.push(ExecRow { items: vec![i], len: n_max }),
                    }
                }
            }
            (rows, true, true, 1)
        }
    };
    Ok(PackingStrategy {
        id: strategy,
        description: DESCRIPTIONS[strategy as usize - 1],
        lens: lens.to_vec(),
        rows,
        pad_linears,
        dense_attention,
        launches,
    })
}

impl Packing {
    pub fn realize(self, lens: &[usize], d: usize, depth: usize, m: &LatencyModel) -> Result<PackingStrategy, ComputeError> {
        match self {
            Packing::Strategy(k) => pack_items(lens, k),
            Packing::Auto => {
                let mut best: Option<(f64, PackingStrategy)> = None;
                for k in 1..=4 {
                    if let Ok(s) = pack_items(lens, k) {
                        let lat = s.latency_proxy(d, depth, m);
                        if best.as_ref().is_none_or(|(b, _)| lat < *b) {
                            best = Some((lat, s));
                        }
                    }
                }
                best.map(|(_, s)| s).ok_or(ComputeError::Empty)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Cond, FlexMode, ForwardItem, InitStyle, ModelParams};
    use crate::numerics::SplitRng;
    use proptest::prelude::*;

    fn costs(cfg: &ModelConfig, lens: &[usize]) -> Vec<ItemCost> {
        lens.iter().map(|&n| ItemCost { p: if n == cfg.tokens(2) { 2 } else { 4 }, d_lora: None, ctx_len: 0 }).collect()
    }

    #[test]
    fn strategy_four_packs_four_weak_per_row() {
        let s = pack(&[(64, 8), (16, 8)], 4).unwrap();
        assert_eq!(s.rows.len(), 10);
        let packed: Vec<_> = s.rows.iter().filter(|r| r.items.len() == 4).collect();
        assert_eq!(packed.len(), 2);
        assert_eq!(s.padding(), 0);
        assert!(matches!(pack(&[(64, 8), (16, 3)], 4), Err(ComputeError::Infeasible { ratio: 4, count: 3, .. })));
        assert!(pack(&[(64, 1), (16, 4)], 4).is_ok());
        assert!(pack(&[(16, 8)], 5).is_err());
    }

    #[test]
    fn degenerate_requests_cost_the_same_everywhere() {
        let cfg = ModelConfig::default();
        let lens = vec![64; 5];
        let c = costs(&cfg, &lens);
        let flops: Vec<u64> = (1..=4).map(|k| pack_items(&lens, k).unwrap().flops(&cfg, &c).model_total()).collect();
        assert!(flops.iter().all(|&f| f == flops[0]));
    }

    #[test]
    fn auto_prefers_strategy_four_when_feasible() {
        let m = LatencyModel::default();
        let mut lens = vec![64; 8];
        lens.extend(vec![16; 8]);
        assert_eq!(Packing::Auto.realize(&lens, 64, 6, &m).unwrap().id, 4);
        assert_eq!("3".parse::<Packing>().unwrap(), Packing::Strategy(3));
        assert!("7".parse::<Packing>().is_err());
    }

    #[test]
    fn every_strategy_matches_independent_forwards() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init(&cfg, 7, InitStyle::Random).unwrap().flexify(FlexMode::Lora, 8).unwrap();
        let mut params = params;
        params.randomize_adapters(9, 0.3);
        let mut rng = SplitRng::new(10);
        let items: Vec<ForwardItem> = (0..12)
            .map(|k| ForwardItem {
                x: rng.normal_tensor(&[1, 8, 8]),
                t: 1 + k * 7,
                cond: if k % 3 == 0 { Cond::Null } else { Cond::Class(k % 3) },
                p: if k % 2 == 0 { 2 } else { 4 },
            })
            .collect();
        let reference = params.predict_many(&items).unwrap();
        let lens: Vec<usize> = items.iter().map(|it| cfg.tokens(it.p)).collect();
        let c: Vec<ItemCost> = items.iter().map(|it| ItemCost::of(&params, it.p, 0)).collect();
        let mut totals = Vec::new();
        for k in 1..=4 {
            let s = pack_items(&lens, k).unwrap();
            let (out, flops) = params.predict_batch(&items, &s.layout()).unwrap();
            for (a, b) in out.iter().zip(&reference) {
                assert!(a.eps.max_abs_diff(&b.eps) < 1e-9, "strategy {k}");
            }
            assert_eq!(flops.model_total(), s.flops(&cfg, &c).model_total(), "strategy {k}");
            totals.push(flops.model_total());
        }
        assert!(totals.iter().all(|&t| t >= totals[1]));
    }

    proptest! {
        #[test]
        fn strategy_two_has_minimum_flops(strong in 1usize..6, weak in 1usize..12) {
            let cfg = ModelConfig::default();
            let lens: Vec<usize> = std::iter::repeat_n(64, strong).chain(std::iter::repeat_n(16, weak)).collect();
            let c = costs(&cfg, &lens);
            let s2 = pack_items(&lens, 2).unwrap().flops(&cfg, &c).model_total();
            for k in [1, 3, 4] {
                if let Ok(s) = pack_items(&lens, k) {
                    prop_assert!(s.flops(&cfg, &c).model_total() >= s2);
                    let layout = s.layout();
                    prop_assert!(layout.validate(&lens).is_ok());
                }
            }
        }
    }
}
