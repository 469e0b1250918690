//! Length-binned batch construction with a shortest-first queue, the
//! duration-spread discard rule, zero padding, and data-seen accounting.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_encoder::num_frames;
use crate::numerics::Rng;

pub const SAMPLE_RATE: usize = 16_000;
pub const BIN_SIZE: usize = 5000;
pub const QUEUE_LEN: usize = 50;
pub const MAX_SPREAD_SECONDS: f64 = 10.0;
/// Hours of speech in the full pre-training set.
pub const DATASET_HOURS: f64 = 912.0;

pub fn seconds(samples: usize) -> f64 {
    samples as f64 / SAMPLE_RATE as f64
}

/// Utterance indices sorted by ascending length, cut into consecutive bins.
/// Ties keep their original order.
pub fn make_bins(lengths: &[usize], bin_size: usize) -> Vec<Vec<usize>> {
    assert!(bin_size > 0, "bin size must be positive");
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| lengths[i]);
    order.chunks(bin_size).map(<[usize]>::to_vec).collect()
}

/// One device-sized batch, as indices into the assembler's length table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpuBatch {
    pub bin: usize,
    /// Ascending by length.
    pub members: Vec<usize>,
    pub total_samples: usize,
    /// Emitted from what was left when the bin ran dry.
    pub remnant: bool,
}

impl GpuBatch {
    pub fn total_seconds(&self) -> f64 {
        seconds(self.total_samples)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Assembly {
    Batch(GpuBatch),
    /// Members spanned more than the allowed duration spread and went back to the pool.
    Discard(Vec<usize>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BinState {
    members: Vec<usize>,
    pool: Vec<usize>,
    queue: BinaryHeap<Reverse<(usize, usize)>>,
}

impl BinState {
    fn remaining(&self) -> usize {
        self.pool.len() + self.queue.len()
    }
}

/// Stateful batch iterator over a fixed set of utterance lengths.
///
/// Within a pass every utterance is drawn once; discarded utterances return
/// to their bin's pool, so a pass delivers each utterance exactly once.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchAssembler {
    lengths: Vec<usize>,
    threshold: usize,
    max_spread: usize,
    bins: Vec<BinState>,
    rng: Rng,
    pass: u64,
    delivered: Vec<u32>,
    discards: u64,
    stalls: usize,
}

impl BatchAssembler {
    /// `threshold_seconds` caps the speech duration of a batch.
    pub fn new(lengths: Vec<usize>, threshold_seconds: f64, rng: Rng) -> Result<Self> {
        Self::with_bin_size(lengths, threshold_seconds, BIN_SIZE, rng)
    }

    pub fn with_bin_size(
        lengths: Vec<usize>,
        threshold_seconds: f64,
        bin_size: usize,
        rng: Rng,
    ) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::InvalidArgument("no utterances to batch".into()));
        }
        if lengths.contains(&0) {
            return Err(Error::InvalidArgument("utterance lengths must be positive".into()));
        }
        if !(threshold_seconds > 0.0 && threshold_seconds.is_finite()) || bin_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "batch threshold and bin size must be positive, got {threshold_seconds} s and {bin_size}"
            )));
        }
        let bins = make_bins(&lengths, bin_size)
            .into_iter()
            .map(|members| BinState {
                members,
                pool: Vec::new(),
                queue: BinaryHeap::new(),
            })
            .collect();
        let n = lengths.len();
        let mut a = BatchAssembler {
            lengths,
            threshold: (threshold_seconds * SAMPLE_RATE as f64).round() as usize,
            max_spread: (MAX_SPREAD_SECONDS * SAMPLE_RATE as f64).round() as usize,
            bins,
            rng,
            pass: 0,
            delivered: vec![0; n],
            discards: 0,
            stalls: 0,
        };
        a.start_pass();
        Ok(a)
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn threshold_seconds(&self) -> f64 {
        seconds(self.threshold)
    }

    /// Completed passes over the data.
    pub fn passes(&self) -> u64 {
        self.pass
    }

    /// How often each utterance has been delivered.
    pub fn delivered(&self) -> &[u32] {
        &self.delivered
    }

    pub fn discards(&self) -> u64 {
        self.discards
    }

    fn start_pass(&mut self) {
        for b in &mut self.bins {
            b.pool = b.members.clone();
            self.rng.shuffle(&mut b.pool);
        }
    }

    fn refill(&mut self, bin: usize) {
        let b = &mut self.bins[bin];
        while b.queue.len() < QUEUE_LEN {
            match b.pool.pop() {
                Some(i) => b.queue.push(Reverse((self.lengths[i], i))),
                None => break,
            }
        }
    }

    fn pick_bin(&mut self) -> usize {
        if self.bins.iter().all(|b| b.remaining() == 0) {
            self.pass += 1;
            self.start_pass();
        }
        // Weighted by what is left so that bins run dry together.
        let total: usize = self.bins.iter().map(BinState::remaining).sum();
        let mut r = self.rng.below(total);
        for (i, b) in self.bins.iter().enumerate() {
            if r < b.remaining() {
                return i;
            }
            r -= b.remaining();
        }
        unreachable!("weights sum to the total")
    }

    /// Assemble the next batch or report a discard.
    pub fn next_event(&mut self) -> Assembly {
        let bin = self.pick_bin();
        self.refill(bin);
        let mut members = Vec::new();
        let mut total = 0usize;
        loop {
            let b = &mut self.bins[bin];
            let Some(&Reverse((len, i))) = b.queue.peek() else {
                break;
            };
            if !members.is_empty() && total + len > self.threshold {
                break;
            }
            b.queue.pop();
            members.push(i);
            total += len;
            self.refill(bin);
        }
        let b = &self.bins[bin];
        let remnant = b.queue.is_empty() && b.pool.is_empty() && total < self.threshold;
        // Refilling mid-assembly can queue something shorter than what was
        // already taken, so order is restored here.
        let lengths = &self.lengths;
        members.sort_by_key(|&i| (lengths[i], i));
        let spread = lengths[*members.last().expect("nonempty")] - lengths[members[0]];
        if spread > self.max_spread {
            self.stalls += 1;
            // A bin that keeps producing wide batches is flushed in order,
            // cutting wherever the spread rule would break.
            if self.stalls > 4 * QUEUE_LEN {
                return self.flush(bin, members);
            }
            self.discards += 1;
            let b = &mut self.bins[bin];
            b.pool.extend(&members);
            self.rng.shuffle(&mut b.pool);
            return Assembly::Discard(members);
        }
        self.stalls = 0;
        self.emit(bin, members, total, remnant)
    }

    fn flush(&mut self, bin: usize, taken: Vec<usize>) -> Assembly {
        self.stalls = 0;
        let b = &mut self.bins[bin];
        let mut rest: Vec<usize> = taken;
        rest.append(&mut b.pool);
        rest.extend(b.queue.drain().map(|Reverse((_, i))| i));
        let lengths = &self.lengths;
        rest.sort_by_key(|&i| (lengths[i], i));
        let mut cut = 1;
        let mut total = lengths[rest[0]];
        while cut < rest.len()
            && lengths[rest[cut]] - lengths[rest[0]] <= self.max_spread
            && total + lengths[rest[cut]] <= self.threshold
        {
            total += lengths[rest[cut]];
            cut += 1;
        }
        let tail = rest.split_off(cut);
        let b = &mut self.bins[bin];
        b.pool = tail;
        self.rng.shuffle(&mut b.pool);
        let remnant = total < self.threshold;
        self.emit(bin, rest, total, remnant)
    }

    fn emit(&mut self, bin: usize, members: Vec<usize>, total: usize, remnant: bool) -> Assembly {
        for &i in &members {
            self.delivered[i] += 1;
        }
        Assembly::Batch(GpuBatch {
            bin,
            members,
            total_samples: total,
            remnant,
        })
    }

    /// Next batch, skipping discards.
    pub fn next_batch(&mut self) -> GpuBatch {
        loop {
            if let Assembly::Batch(b) = self.next_event() {
                return b;
            }
        }
    }
}

/// Zero-padded waveforms of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Collated {
    pub ids: Vec<String>,
    /// Every row has the length of the longest utterance.
    pub waves: Vec<Vec<f64>>,
    /// True sample counts.
    pub lengths: Vec<usize>,
}

impl Collated {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn padded_len(&self) -> usize {
        self.waves.first().map_or(0, Vec::len)
    }

    /// Valid latent frames per utterance.
    pub fn valid_frames(&self) -> Vec<usize> {
        self.lengths.iter().map(|&r| num_frames(r)).collect()
    }

    /// Latent frames that come purely from padding, per utterance.
    pub fn padding_frames(&self) -> Vec<usize> {
        let t = num_frames(self.padded_len());
        self.valid_frames().iter().map(|&v| t - v).collect()
    }

    pub fn total_seconds(&self) -> f64 {
        self.lengths.iter().map(|&r| seconds(r)).sum()
    }

    /// Re-collate a subset of the rows.
    pub fn select(&self, rows: &[usize]) -> Collated {
        let max = rows.iter().map(|&r| self.lengths[r]).max().unwrap_or(0);
        Collated {
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            waves: rows.iter().map(|&r| self.waves[r][..max].to_vec()).collect(),
            lengths: rows.iter().map(|&r| self.lengths[r]).collect(),
        }
    }
}

/// Pad every waveform with trailing zeros to the longest one.
pub fn pad_and_collate(utts: &[(String, Vec<f64>)]) -> Result<Collated> {
    if utts.is_empty() {
        return Err(Error::InvalidArgument("cannot collate an empty batch".into()));
    }
    let max = utts.iter().map(|(_, w)| w.len()).max().unwrap_or(0);
    Ok(Collated {
        ids: utts.iter().map(|(id, _)| id.clone()).collect(),
        waves: utts
            .iter()
            .map(|(_, w)| {
                let mut p = w.clone();
                p.resize(max, 0.0);
                p
            })
            .collect(),
        lengths: utts.iter().map(|(_, w)| w.len()).collect(),
    })
}

/// Upper-bound amount of speech observed by a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataSeen {
    pub hours: f64,
    pub epochs: f64,
}

pub fn data_seen(batch_seconds: f64, iterations: u64, dataset_hours: f64) -> DataSeen {
    let hours = batch_seconds * iterations as f64 / 3600.0;
    DataSeen {
        hours,
        epochs: hours / dataset_hours,
    }
}

/// Cumulative data-seen record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSeenLedger {
    pub batch_seconds: f64,
    pub iterations: u64,
    pub measured_seconds: f64,
    pub repeats: Vec<u32>,
    rows: Vec<LedgerRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub iteration: u64,
    pub upper_bound_seconds: f64,
    pub measured_seconds: f64,
    pub max_repeats: u32,
}

impl DataSeenLedger {
    pub fn new(batch_seconds: f64, utterances: usize) -> Self {
        DataSeenLedger {
            batch_seconds,
            iterations: 0,
            measured_seconds: 0.0,
            repeats: vec![0; utterances],
            rows: Vec::new(),
        }
    }

    /// Account one optimizer step made of `batches`.
    pub fn record(&mut self, batches: &[GpuBatch]) {
        self.iterations += 1;
        for b in batches {
            self.measured_seconds += b.total_seconds();
            for &i in &b.members {
                self.repeats[i] += 1;
            }
        }
        let row = self.row();
        self.rows.push(row);
    }

    pub fn upper_bound_seconds(&self) -> f64 {
        self.batch_seconds * self.iterations as f64
    }

    pub fn row(&self) -> LedgerRow {
        LedgerRow {
            iteration: self.iterations,
            upper_bound_seconds: self.upper_bound_seconds(),
            measured_seconds: self.measured_seconds,
            max_repeats: self.repeats.iter().copied().max().unwrap_or(0),
        }
    }

    pub fn rows(&self) -> &[LedgerRow] {
        &self.rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn secs(s: &[f64]) -> Vec<usize> {
        s.iter().map(|x| (x * SAMPLE_RATE as f64).round() as usize).collect()
    }

    #[test]
    fn bin_sizes() {
        let lens: Vec<usize> = (0..12000).map(|i| 16000 + (i * 7919) % 5000).collect();
        let bins = make_bins(&lens, BIN_SIZE);
        assert_eq!(bins.iter().map(Vec::len).collect::<Vec<_>>(), vec![5000, 5000, 2000]);
        for w in bins.concat().windows(2) {
            assert!(lens[w[0]] <= lens[w[1]]);
        }
        assert_eq!(make_bins(&lens[..10], BIN_SIZE).len(), 1);
    }

    #[test]
    fn shortest_first_stop_rule() {
        let mut a = BatchAssembler::new(secs(&[2.0, 3.0, 4.0]), 5.0, Rng::new(0)).unwrap();
        let b = a.next_batch();
        assert_eq!(b.members, vec![0, 1]);
        assert_eq!(b.total_seconds(), 5.0);
        assert!(!b.remnant);
        let b = a.next_batch();
        assert_eq!(b.members, vec![2]);
        assert!(b.remnant);
    }

    #[test]
    fn single_utterance_batches_at_threshold() {
        let mut a = BatchAssembler::new(secs(&[150.0; 7]), 150.0, Rng::new(1)).unwrap();
        for _ in 0..20 {
            assert_eq!(a.next_batch().members.len(), 1);
        }
    }

    #[test]
    fn wide_batches_are_discarded() {
        let mut a = BatchAssembler::new(secs(&[1.0, 12.0]), 20.0, Rng::new(2)).unwrap();
        match a.next_event() {
            Assembly::Discard(m) => assert_eq!(m, vec![0, 1]),
            other => panic!("expected a discard, got {other:?}"),
        }
        // Nothing is lost: the bin is eventually flushed in spread-respecting pieces.
        let mut seen = Vec::new();
        while seen.len() < 2 {
            seen.extend(a.next_batch().members);
        }
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1]);
    }

    #[test]
    fn collate_pads_with_zeros() {
        let c = pad_and_collate(&[("a".into(), vec![1.0; 16000]), ("b".into(), vec![2.0; 32000])]).unwrap();
        assert_eq!(c.padded_len(), 32000);
        assert!(c.waves[0][16000..].iter().all(|&x| x == 0.0));
        assert_eq!(c.valid_frames(), vec![50, 100]);
        assert_eq!(c.padding_frames(), vec![50, 0]);
        let same = pad_and_collate(&[("a".into(), vec![1.0; 800]), ("b".into(), vec![1.0; 800])]).unwrap();
        assert!(same.waves.iter().all(|w| w.len() == 800 && w.iter().all(|&x| x == 1.0)));
        assert!(pad_and_collate(&[]).is_err());
    }

    #[test]
    fn data_seen_rows() {
        let d = data_seen(4800.0, 400_000, DATASET_HOURS);
        assert!((d.hours - 533_333.333).abs() < 1e-2);
        assert_eq!(d.epochs.round(), 585.0);
        let d = data_seen(87.5, 400_000, DATASET_HOURS);
        assert_eq!(d.hours.round(), 9722.0);
        assert_eq!(d.epochs.round(), 11.0);
        assert_eq!(data_seen(87.5, 0, DATASET_HOURS).hours, 0.0);
    }

    #[test]
    fn ledger_csv() {
        let mut l = DataSeenLedger::new(10.0, 3);
        l.record(&[GpuBatch {
            bin: 0,
            members: vec![0, 2],
            total_samples: 16000 * 9,
            remnant: false,
        }]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ledger.csv");
        l.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text, "iteration,upper_bound_seconds,measured_seconds,max_repeats\n1,10.0,9.0,1\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn batches_respect_rules_and_passes_are_fair(
            lens in prop::collection::vec(13_280usize..480_000, 1..400),
            threshold in 30.0f64..200.0,
            bin in prop::sample::select(vec![40usize, 200]),
            seed in any::<u64>(),
        ) {
            // Bins larger than the queue exercise refills during assembly.
            let mut a = BatchAssembler::with_bin_size(lens.clone(), threshold, bin, Rng::new(seed)).unwrap();
            let cap = (threshold * SAMPLE_RATE as f64).round() as usize;
            let mut count = 0;
            while a.passes() < 2 {
                let b = a.next_batch();
                let l: Vec<usize> = b.members.iter().map(|&i| lens[i]).collect();
                prop_assert!(l.windows(2).all(|w| w[0] <= w[1]));
                let spread = l.iter().max().unwrap() - l.iter().min().unwrap();
                prop_assert!(spread <= 10 * SAMPLE_RATE);
                prop_assert_eq!(l.iter().sum::<usize>(), b.total_samples);
                prop_assert!(b.total_samples <= cap || b.members.len() == 1);
                count += 1;
                prop_assert!(count < 100_000);
            }
            // Two passes completed plus possibly part of a third.
            let d = a.delivered();
            let lo = *d.iter().min().unwrap();
            let hi = *d.iter().max().unwrap();
            prop_assert!(lo >= 2 && hi <= 3);
        }

        #[test]
        fn assembly_is_deterministic(lens in prop::collection::vec(13_280usize..100_000, 1..60), seed in any::<u64>()) {
            let run = || {
                let mut a = BatchAssembler::new(lens.clone(), 20.0, Rng::new(seed)).unwrap();
                (0..30).map(|_| a.next_batch()).collect::<Vec<_>>()
            };
            prop_assert_eq!(run(), run());
        }
    }
}
