use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pass {
    Forward,
    Backward,
}

impl fmt::Display for Pass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pass::Forward => "forward",
            Pass::Backward => "backward",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Tally {
    count: u64,
    bytes: u64,
}

/// Counts simulated collectives per pass. Bytes follow the ring all-reduce
/// cost of `2 (W - 1)` buffer transfers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CollectiveLedger {
    forward: Tally,
    backward: Tally,
}

impl CollectiveLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn all_reduce_count(&self, pass: Pass) -> u64 {
        self.tally(pass).count
    }

    pub fn bytes(&self, pass: Pass) -> u64 {
        self.tally(pass).bytes
    }

    fn tally(&self, pass: Pass) -> &Tally {
        match pass {
            Pass::Forward => &self.forward,
            Pass::Backward => &self.backward,
        }
    }

    /// Sums per-worker buffers in worker order. A single worker needs no
    /// communication and records nothing.
    pub fn all_reduce(&mut self, pass: Pass, mut parts: Vec<Tensor>) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("all-reduce over zero workers"));
        }
        let world = parts.len();
        let mut acc = parts.remove(0);
        if world == 1 {
            return Ok(acc);
        }
        for p in &parts {
            acc.add_assign(p)?;
        }
        let tally = match pass {
            Pass::Forward => &mut self.forward,
            Pass::Backward => &mut self.backward,
        };
        tally.count += 1;
        tally.bytes += 2 * (world as u64 - 1) * acc.size_bytes() as u64;
        Ok(acc)
    }

    /// `pass,collective_type,count,bytes` rows, one per pass.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "pass,collective_type,count,bytes")?;
        for pass in [Pass::Forward, Pass::Backward] {
            let t = self.tally(pass);
            writeln!(w, "{pass},all_reduce,{},{}", t.count, t.bytes)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_bytes() {
        let mut ledger = CollectiveLedger::new();
        let parts = vec![Tensor::ones(&[2, 3]), Tensor::ones(&[2, 3]), Tensor::full(&[2, 3], 2.0)];
        let sum = ledger.all_reduce(Pass::Forward, parts).unwrap();
        assert_eq!(sum.data(), &[4.0; 6]);
        assert_eq!(ledger.all_reduce_count(Pass::Forward), 1);
        assert_eq!(ledger.bytes(Pass::Forward), 2 * 2 * 48);
        assert_eq!(ledger.all_reduce_count(Pass::Backward), 0);

        ledger.all_reduce(Pass::Backward, vec![Tensor::ones(&[1])]).unwrap();
        assert_eq!(ledger.all_reduce_count(Pass::Backward), 0);

        let mut csv = Vec::new();
        ledger.write_csv(&mut csv).unwrap();
        assert_eq!(
            String::from_utf8(csv).unwrap(),
            "pass,collective_type,count,bytes\nforward,all_reduce,1,192\nbackward,all_reduce,0,0\n"
        );
        ledger.reset();
        assert_eq!(ledger, CollectiveLedger::new());
    }
}
