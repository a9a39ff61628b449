//! Byte-level communication metering and parameter storage accounting.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::{Add, AddAssign};
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::model::{smashed_size, SplitModelSpec};
use crate::protocol::{Direction, Message, MessageKind, Strategy, StrategyKind};

/// Bytes per label on the wire (up to 256 classes).
pub const LABEL_BYTES: usize = 1;

/// Default wire width of one tensor element (32-bit floats).
pub const DEFAULT_BYTES_PER_ELEMENT: usize = 4;

/// One metered message. Field names are the ledger CSV columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub client: usize,
    pub direction: Direction,
    pub message_kind: MessageKind,
    pub bytes: u64,
}

impl LedgerEntry {
    pub fn of(round: usize, msg: &Message, bytes_per_element: usize) -> Self {
        Self {
            round,
            client: msg.client(),
            direction: msg.direction(),
            message_kind: msg.kind(),
            bytes: msg.byte_size(bytes_per_element) as u64,
        }
    }
}

/// Running totals plus the full message log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
    uplink: u64,
    downlink: u64,
    comm_rounds: u64,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, entry: LedgerEntry) {
        match entry.direction {
            Direction::Uplink => self.uplink += entry.bytes,
            Direction::Downlink => self.downlink += entry.bytes,
        }
        if entry.message_kind == MessageKind::SmashedUpload {
            self.comm_rounds += 1;
        }
        self.entries.push(entry);
    }

    pub fn record_message(&mut self, round: usize, msg: &Message, bytes_per_element: usize) {
        self.record(LedgerEntry::of(round, msg, bytes_per_element));
    }

    pub fn uplink(&self) -> u64 {
        self.uplink
    }

    pub fn downlink(&self) -> u64 {
        self.downlink
    }

    pub fn total(&self) -> u64 {
        self.uplink + self.downlink
    }

    /// Smashed-data uploads so far.
    pub fn comm_rounds(&self) -> u64 {
        self.comm_rounds
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn load(&self) -> EpochLoad {
        EpochLoad {
            uplink: self.uplink,
            downlink: self.downlink,
        }
    }

    pub fn per_round(&self) -> BTreeMap<usize, EpochLoad> {
        self.breakdown(|e| e.round)
    }

    pub fn per_client(&self) -> BTreeMap<usize, EpochLoad> {
        self.breakdown(|e| e.client)
    }

    fn breakdown(&self, key: impl Fn(&LedgerEntry) -> usize) -> BTreeMap<usize, EpochLoad> {
        let mut out: BTreeMap<usize, EpochLoad> = BTreeMap::new();
        for e in &self.entries {
            let slot = out.entry(key(e)).or_default();
            match e.direction {
                Direction::Uplink => slot.uplink += e.bytes,
                Direction::Downlink => slot.downlink += e.bytes,
            }
        }
        out
    }

    /// Writes `round,client,direction,message_kind,bytes`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.entries {
            w.serialize(e)?;
        }
        if self.entries.is_empty() {
            w.write_record(["round", "client", "direction", "message_kind", "bytes"])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

impl Extend<LedgerEntry> for CommLedger {
    fn extend<I: IntoIterator<Item = LedgerEntry>>(&mut self, iter: I) {
        for e in iter {
            self.record(e);
        }
    }
}

/// Uplink and downlink bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct EpochLoad {
    pub uplink: u64,
    pub downlink: u64,
}

impl EpochLoad {
    pub fn total(&self) -> u64 {
        self.uplink + self.downlink
    }
}

impl Add for EpochLoad {
    type Output = EpochLoad;

    fn add(self, rhs: EpochLoad) -> EpochLoad {
        EpochLoad {
            uplink: self.uplink + rhs.uplink,
            downlink: self.downlink + rhs.downlink,
        }
    }
}

impl AddAssign for EpochLoad {
    fn add_assign(&mut self, rhs: EpochLoad) {
        *self = *self + rhs;
    }
}

/// Per-message byte sizes: smashed activations `s`, labels `l`, client
/// model `p_c` and aux head `p_a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MessageSizes {
    pub smashed: u64,
    pub labels: u64,
    pub client_model: u64,
    pub aux: u64,
}

impl MessageSizes {
    /// Sizes for full batches of `batch_size` under `kind` (the aux head is
    /// counted only when the strategy ships it).
    pub fn for_spec(
        spec: &SplitModelSpec,
        kind: StrategyKind,
        batch_size: usize,
        bytes_per_element: usize,
    ) -> Result<Self> {
        let (elements, _) = smashed_size(spec, batch_size, bytes_per_element)?;
        let aux = if kind.uses_aux() {
            spec.aux_param_count()
        } else {
            0
        };
        Ok(Self {
            smashed: (elements * bytes_per_element) as u64,
            labels: (batch_size * LABEL_BYTES) as u64,
            client_model: (spec.client_param_count() * bytes_per_element) as u64,
            aux: (aux * bytes_per_element) as u64,
        })
    }
}

/// Analytic bytes for one epoch with aggregation once per epoch, for
/// `n_clients` participants with `batches` equally sized batches each.
pub fn predict_epoch_load(
    strategy: &Strategy,
    n_clients: usize,
    batches: usize,
    sizes: &MessageSizes,
) -> EpochLoad {
    let n = n_clients as u64;
    let b = batches as u64;
    let s = sizes.smashed;
    let l = sizes.labels;
    let (pc, pa) = (sizes.client_model, sizes.aux);
    match strategy.kind {
        StrategyKind::CseFsl | StrategyKind::FslAn => {
            let h = if strategy.kind == StrategyKind::CseFsl {
                strategy.h as u64
            } else {
                1
            };
            EpochLoad {
                uplink: n * (b.div_ceil(h) * (s + l) + pc + pa),
                downlink: n * (pc + pa),
            }
        }
        StrategyKind::FslMc | StrategyKind::FslOc => EpochLoad {
            uplink: n * (b * (s + l) + pc),
            downlink: n * (b * s + pc),
        },
    }
}

/// Server-resident parameters during aggregation.
pub fn storage_of(kind: StrategyKind, n_clients: usize, x_c: usize, a_c: usize, x_s: usize) -> usize {
    let a_c = if kind.uses_aux() { a_c } else { 0 };
    n_clients * (x_c + a_c) + kind.server_copies(n_clients) * x_s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{GradDown, Strategy};
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn sizes() -> MessageSizes {
        MessageSizes {
            smashed: 4096,
            labels: 32,
            client_model: 1152,
            aux: 396,
        }
    }

    #[test]
    fn grad_down_record() {
        let mut l = CommLedger::new();
        assert_eq!(l.total(), 0);
        l.record_message(
            0,
            &Message::GradDown(GradDown {
                client: 0,
                batch_id: 0,
                d_smashed: Tensor::zeros(&[100]),
            }),
            4,
        );
        assert_eq!(l.downlink(), 400);
        assert_eq!(l.uplink(), 0);
        assert_eq!(l.comm_rounds(), 0);
    }

    #[test]
    fn csv_header_when_empty() {
        let mut buf = Vec::new();
        CommLedger::new().write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap().trim(),
            "round,client,direction,message_kind,bytes"
        );
    }

    #[test]
    fn one_upload_per_epoch_minimises_uplink() {
        let b = 12;
        let z = sizes();
        let best = predict_epoch_load(&Strategy::cse_fsl(b), 3, b, &z);
        assert_eq!(best.uplink, 3 * (z.smashed + z.labels + z.client_model + z.aux));
        for h in 1..=b {
            assert!(predict_epoch_load(&Strategy::cse_fsl(h), 3, b, &z).uplink >= best.uplink);
        }
    }

    #[test]
    fn storage_equal_without_aux_for_single_client() {
        let v: Vec<usize> = StrategyKind::ALL
            .iter()
            .map(|&k| storage_of(k, 1, 100, 0, 500))
            .collect();
        assert_eq!(v, vec![600; 4]);
    }

    proptest! {
        #[test]
        fn an_never_cheaper_than_cse(
            b in 1usize..64, h in 1usize..64, n in 1usize..10,
            s in 1u64..10_000, pc in 0u64..10_000, pa in 0u64..1000,
        ) {
            let z = MessageSizes { smashed: s, labels: 8, client_model: pc, aux: pa };
            let an = predict_epoch_load(&Strategy::new(StrategyKind::FslAn), n, b, &z);
            let cse = predict_epoch_load(&Strategy::cse_fsl(h), n, b, &z);
            prop_assert!(an.total() >= cse.total());
            if h == 1 {
                prop_assert_eq!(an, cse);
            }
            let next = predict_epoch_load(&Strategy::cse_fsl(h + 1), n, b, &z);
            prop_assert!(next.uplink <= cse.uplink);
        }
    }
}
