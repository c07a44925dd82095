//! Token pacer: buffers bursty answering tokens and releases them to the
//! user no faster than one per `target_tpot`.

use crate::error::{Error, Result};

/// Tolerance for comparing simulated timestamps against pacing deadlines
/// built by repeated addition.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct PacerState {
    pub target_tpot: f64,
    /// Generation time of each answering token, in order.
    pub delivery_times: Vec<f64>,
    /// When the user consumes each delivered token.
    pub digest_times: Vec<f64>,
    /// Last token digested on arrival rather than on the pacing clock.
    /// Later deadlines are `time + steps * tpot`, not a running sum, so
    /// on-pace deliveries match the expected curve bit for bit.
    anchor: Option<(f64, usize)>,
}

impl PacerState {
    pub fn new(target_tpot: f64) -> Self {
        Self {
            target_tpot,
            delivery_times: Vec::new(),
            digest_times: Vec::new(),
            anchor: None,
        }
    }

    /// `t0`: the first answering token is digested the moment it arrives.
    pub fn first_answer_delivery_time(&self) -> Option<f64> {
        self.delivery_times.first().copied()
    }

    pub fn delivered(&self) -> usize {
        self.delivery_times.len()
    }

    pub fn on_delivery(&mut self, token_index: usize, generation_time: f64) -> Result<()> {
        if token_index != self.delivery_times.len() {
            return Err(Error::OutOfOrderDelivery {
                expected: self.delivery_times.len(),
                got: token_index,
            });
        }
        let digest = match self.anchor {
            Some((at, index)) if generation_time <= at + (token_index - index) as f64 * self.target_tpot => {
                at + (token_index - index) as f64 * self.target_tpot
            }
            _ => {
                self.anchor = Some((generation_time, token_index));
                generation_time
            }
        };
        self.delivery_times.push(generation_time);
        self.digest_times.push(digest);
        Ok(())
    }

    /// Tokens the user has consumed by `now`.
    pub fn digested_by(&self, now: f64) -> usize {
        self.digest_times.partition_point(|&d| d <= now + TIME_EPS)
    }

    /// Tokens the user expects to have consumed by `now`, clipped to `total`.
    pub fn expected_by(&self, now: f64, total: usize) -> usize {
        match self.first_answer_delivery_time() {
            None => 0,
            Some(t0) if now < t0 => 0,
            Some(t0) => {
                let steps = ((now - t0) / self.target_tpot + TIME_EPS).floor() as usize;
                (1 + steps).min(total)
            }
        }
    }

    /// True while the digested count keeps up with the expected count within
    /// `slack_tokens`. A pacer that has not started yet is healthy.
    pub fn is_healthy(&self, now: f64, total: usize, slack_tokens: usize) -> bool {
        self.digested_by(now) + slack_tokens >= self.expected_by(now, total)
    }

    /// The buffer is empty and the user is waiting for the next token.
    pub fn is_starved(&self, now: f64, total: usize) -> bool {
        let delivered = self.delivered();
        delivered > 0
            && delivered < total
            && self.digested_by(now) == delivered
            && now > self.digest_times[delivered - 1] + self.target_tpot + TIME_EPS
    }
}

/// Digest times for a full delivery sequence.
pub fn digest_schedule(delivery_times: &[f64], target_tpot: f64) -> Vec<f64> {
    let mut pacer = PacerState::new(target_tpot);
    for (i, &t) in delivery_times.iter().enumerate() {
        pacer.on_delivery(i, t).expect("indices are generated in order");
    }
    pacer.digest_times
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn on_time_tokens_are_digested_on_delivery() {
        let d = [2.0, 2.5, 3.0, 3.5];
        assert_eq!(digest_schedule(&d, 0.5), d.to_vec());
    }

    #[test]
    fn burst_is_spread_at_target_pace() {
        assert_eq!(digest_schedule(&[7.0; 4], 1.0), vec![7.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn late_token_starves_the_user() {
        let mut p = PacerState::new(1.0);
        for (i, t) in [0.0, 1.0, 2.0].into_iter().enumerate() {
            p.on_delivery(i, t).unwrap();
        }
        assert!(p.is_starved(4.0, 4));
        assert!(!p.is_healthy(4.0, 4, 0));
        p.on_delivery(3, 5.0).unwrap();
        assert_eq!(p.digest_times, vec![0.0, 1.0, 2.0, 5.0]);
        assert!(!p.is_starved(5.5, 4));
    }

    #[test]
    fn out_of_order_delivery_is_rejected() {
        let mut p = PacerState::new(0.1);
        p.on_delivery(0, 1.0).unwrap();
        assert!(matches!(
            p.on_delivery(2, 1.1),
            Err(Error::OutOfOrderDelivery { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn health_tracks_expected_count() {
        let mut p = PacerState::new(0.1);
        assert!(p.is_healthy(100.0, 10, 0));
        for i in 0..5 {
            p.on_delivery(i, 1.0 + 0.03 * i as f64).unwrap();
        }
        // five buffered tokens cover 1.0..=1.4
        assert!(p.is_healthy(1.4, 10, 0));
        assert!(!p.is_healthy(1.55, 10, 0));
        assert!(p.is_healthy(1.55, 10, 1));
        // expected count is clipped to the total
        assert!(p.is_healthy(50.0, 5, 0));
    }

    proptest! {
        #[test]
        fn recurrence_holds_for_every_prefix(
            gaps in prop::collection::vec(0.0f64..3.0, 1..60),
            tpot in 0.05f64..2.0,
        ) {
            let mut t = 0.0;
            let deliveries: Vec<f64> = gaps.iter().map(|g| { t += g; t }).collect();
            let digests = digest_schedule(&deliveries, tpot);
            // independent fold
            let folded = deliveries.iter().skip(1).fold(vec![deliveries[0]], |mut acc, &d| {
                let prev = *acc.last().unwrap();
                acc.push(if d > prev + tpot { d } else { prev + tpot });
                acc
            });
            for (a, b) in digests.iter().zip(&folded) {
                prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
            }
            prop_assert_eq!(digests[0], deliveries[0]);
            for k in 1..digests.len() {
                prop_assert!(digests[k] >= digests[k - 1]);
                prop_assert!(digests[k] >= deliveries[k]);
            }
        }
    }
}
