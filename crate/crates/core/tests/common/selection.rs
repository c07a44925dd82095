//! Brute-force transcription of the two instance-selection procedures,
//! evaluated as a left fold so shared prefixes are folded once.

use pascal_core::MonitorSnapshot;

/// Running minima after folding a prefix of instances. Ties keep the
/// earlier instance (strict `<`).
#[derive(Debug, Clone, Copy, Default)]
pub struct Fold {
    healthy_m: Option<(u64, usize)>,
    any_m: Option<(u64, usize)>,
    healthy_r: Option<(usize, usize)>,
    any_ra: Option<(usize, usize)>,
}

fn keep_min<K: PartialOrd + Copy>(best: Option<(K, usize)>, key: K, i: usize) -> Option<(K, usize)> {
    match best {
        Some((k, _)) if k <= key => best,
        _ => Some((key, i)),
    }
}

impl Fold {
    pub fn push(self, i: usize, s: &MonitorSnapshot) -> Fold {
        let ra = s.reasoning_requests + s.fresh_answering_requests;
        Fold {
            healthy_m: if s.slo_healthy {
                keep_min(self.healthy_m, s.kv_tokens, i)
            } else {
                self.healthy_m
            },
            any_m: keep_min(self.any_m, s.kv_tokens, i),
            healthy_r: if s.slo_healthy {
                keep_min(self.healthy_r, s.reasoning_requests, i)
            } else {
                self.healthy_r
            },
            any_ra: keep_min(self.any_ra, ra, i),
        }
    }

    /// `(reasoning placement, answering placement)`: the healthy set when
    /// it is non-empty, otherwise every instance (with r + a for answering).
    pub fn result(&self) -> (usize, usize) {
        let reasoning = self.healthy_m.or(self.any_m).expect("non-empty").1;
        let answering = match self.healthy_r {
            Some((_, i)) => i,
            None => self.any_ra.expect("non-empty").1,
        };
        (reasoning, answering)
    }
}

pub fn brute(s: &[MonitorSnapshot]) -> (usize, usize) {
    s.iter()
        .enumerate()
        .fold(Fold::default(), |f, (i, x)| f.push(i, x))
        .result()
}

/// The 128 states of one instance: t (1 bit), m, r, a in 0..=3.
pub fn variants(instance: usize) -> Vec<MonitorSnapshot> {
    (0..128usize)
        .map(|c| MonitorSnapshot {
            instance,
            slo_healthy: c & 1 == 1,
            kv_tokens: ((c >> 1) & 3) as u64,
            reasoning_requests: (c >> 3) & 3,
            fresh_answering_requests: (c >> 5) & 3,
            free_gpu_tokens: 0,
        })
        .collect()
}

fn walk(
    table: &[Vec<MonitorSnapshot>],
    buf: &mut [MonitorSnapshot; 4],
    depth: usize,
    n: usize,
    prefix: Fold,
    visit: &mut impl FnMut(&[MonitorSnapshot], (usize, usize)),
) {
    for s in &table[depth] {
        buf[depth] = *s;
        let folded = prefix.push(depth, s);
        if depth + 1 == n {
            visit(&buf[..n], folded.result());
        } else {
            walk(table, buf, depth + 1, n, folded, visit);
        }
    }
}

/// Visits every vector of 1 to 4 instances with its brute-force answer;
/// returns the number of vectors.
pub fn for_each_vector(mut visit: impl FnMut(&[MonitorSnapshot], (usize, usize))) -> u64 {
    let table: Vec<Vec<MonitorSnapshot>> = (0..4).map(variants).collect();
    let mut buf = [table[0][0]; 4];
    let mut visited = 0u64;
    for n in 1..=4 {
        walk(&table, &mut buf, 0, n, Fold::default(), &mut |s, expected| {
            visited += 1;
            visit(s, expected);
        });
    }
    visited
}
