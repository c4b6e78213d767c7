use serde::{Deserialize, Serialize};

use super::Method;
use crate::client::payload_bytes;

/// Closed-form communication totals for one run. Wire headers are excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteAccount {
    pub up: u64,
    pub down: u64,
    pub total: u64,
    /// `4·M·C < 4·P`: a logit payload is smaller than a parameter payload.
    pub logits_cheaper: bool,
}

/// Per-client bytes in one round `(up, down)`.
pub fn round_bytes(method: Method, params: u64, m: usize, c: usize, round: u32) -> (u64, u64) {
    let logits = payload_bytes(m, c);
    match method {
        Method::FedkdNas | Method::Feddistill => (logits, logits),
        Method::Fedavg => (4 * params, 4 * params),
        // the teacher predictions are sent once, nothing goes up
        Method::LocalKd => (0, if round == 1 { logits } else { 0 }),
    }
}

pub fn account_bytes(
    method: Method,
    params: u64,
    m: usize,
    c: usize,
    rounds: u32,
    clients: usize,
) -> ByteAccount {
    let (mut up, mut down) = (0u64, 0u64);
    for r in 1..=rounds {
        let (u, d) = round_bytes(method, params, m, c, r);
        up += u * clients as u64;
        down += d * clients as u64;
    }
    ByteAccount {
        up,
        down,
        total: up + down,
        logits_cheaper: payload_bytes(m, c) < 4 * params,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logit_methods_pay_four_mc_each_way() {
        let a = account_bytes(Method::FedkdNas, 1_000_000, 40448, 10, 1, 1);
        assert_eq!(a.up, 1_617_920);
        assert_eq!(a.down, 1_617_920);
        let b = account_bytes(Method::Feddistill, 7, 100, 10, 30, 5);
        assert_eq!(b.total, 30 * 5 * 2 * 4000);
    }

    #[test]
    fn fedavg_pays_four_p() {
        let a = account_bytes(Method::Fedavg, 2_500, 200, 10, 3, 4);
        assert_eq!(a.up, 3 * 4 * 10_000);
        assert_eq!(a.total, 2 * a.up);
    }

    #[test]
    fn local_kd_only_receives_the_teacher_once() {
        let a = account_bytes(Method::LocalKd, 2_500, 200, 10, 30, 5);
        assert_eq!(a.up, 0);
        assert_eq!(a.down, 5 * 8000);
        assert_eq!(
            account_bytes(Method::LocalKd, 2_500, 200, 10, 0, 5).total,
            0
        );
    }

    #[test]
    fn crossover_predicate() {
        // large model, small public set: logits cheaper
        assert!(account_bytes(Method::FedkdNas, 3_500_000, 40448, 10, 1, 1).logits_cheaper);
        // small model, large public set × many classes: parameters cheaper
        assert!(!account_bytes(Method::FedkdNas, 100_000, 100_000, 47, 1, 1).logits_cheaper);
    }
}
