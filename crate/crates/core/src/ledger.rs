//! The share ledger: who uploaded how much to whom.
//!
//! Entry `(i, j)` of a [`ShareMatrix`] is the cumulative amount peer `i` has
//! uploaded to peer `j`. Row sums are uploads, column sums are downloads.
//! Storage is sparse; absent entries are zero and stored entries are always
//! strictly positive.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense index of a peer inside one ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PeerId(pub usize);

impl PeerId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<usize> for PeerId {
    fn from(i: usize) -> Self {
        PeerId(i)
    }
}

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("peer {0} cannot transact with itself")]
    SelfTransaction(PeerId),
    #[error("amount {0} is negative")]
    NegativeAmount(f64),
    #[error("amount {0} is not a finite number")]
    NonFiniteAmount(f64),
    #[error("peer {peer} out of range for a ledger of {n} peers")]
    PeerOutOfRange { peer: usize, n: usize },
    #[error("a ledger needs at least 2 peers, got {0}")]
    TooFewPeers(usize),
    #[error("matrix is not square: row {row} has {found} fields, expected {expected}")]
    NonSquare {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("parse error at line {line}, field {field}: {message}")]
    Parse {
        line: u64,
        field: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// On-disk representation of a ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LedgerFormat {
    /// N lines of N comma-separated amounts; row i holds the uploads of peer i.
    DenseCsv,
    /// `{"n": N, "entries": [{"from": i, "to": j, "amount": a}, ...]}`.
    SparseJson,
}

impl LedgerFormat {
    /// Guess the format from a file name: `.json` is sparse, anything else dense CSV.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => LedgerFormat::SparseJson,
            _ => LedgerFormat::DenseCsv,
        }
    }
}

/// Sparse N×N nonnegative share matrix with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct ShareMatrix {
    n: usize,
    entries: BTreeMap<(usize, usize), f64>,
}

/// Row and column totals of a ledger.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerSummary {
    pub upload_totals: Vec<f64>,
    pub download_totals: Vec<f64>,
    pub total: f64,
}

impl ShareMatrix {
    /// Empty ledger for `n` peers.
    pub fn new(n: usize) -> Result<Self, LedgerError> {
        if n < 2 {
            return Err(LedgerError::TooFewPeers(n));
        }
        Ok(Self {
            n,
            entries: BTreeMap::new(),
        })
    }

    /// Builds a ledger from a dense row-major matrix. Zero cells are dropped.
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self, LedgerError> {
        let n = rows.len();
        let mut ledger = Self::new(n)?;
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(LedgerError::NonSquare {
                    row: i,
                    found: row.len(),
                    expected: n,
                });
            }
            for (j, &amount) in row.iter().enumerate() {
                if i == j {
                    check_amount(amount)?;
                    if amount != 0.0 {
                        return Err(LedgerError::SelfTransaction(PeerId(i)));
                    }
                    continue;
                }
                ledger.record_transaction(PeerId(i), PeerId(j), amount)?;
            }
        }
        Ok(ledger)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Amount uploaded by `from` to `to` (zero when absent).
    pub fn get(&self, from: PeerId, to: PeerId) -> f64 {
        self.entries.get(&(from.0, to.0)).copied().unwrap_or(0.0)
    }

    /// Number of stored (strictly positive) entries.
    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Stored entries in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (PeerId, PeerId, f64)> + '_ {
        self.entries.iter().map(|(&(i, j), &a)| (PeerId(i), PeerId(j), a))
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.n]; self.n];
        for (&(i, j), &a) in &self.entries {
            dense[i][j] = a;
        }
        dense
    }

    fn check_peer(&self, peer: PeerId) -> Result<(), LedgerError> {
        if peer.0 >= self.n {
            return Err(LedgerError::PeerOutOfRange {
                peer: peer.0,
                n: self.n,
            });
        }
        Ok(())
    }

    /// Adds `amount` to the entry `(uploader, downloader)`. A zero amount is a no-op.
    pub fn record_transaction(
        &mut self,
        uploader: PeerId,
        downloader: PeerId,
        amount: f64,
    ) -> Result<(), LedgerError> {
        self.check_peer(uploader)?;
        self.check_peer(downloader)?;
        if uploader == downloader {
            return Err(LedgerError::SelfTransaction(uploader));
        }
        check_amount(amount)?;
        if amount > 0.0 {
            *self.entries.entry((uploader.0, downloader.0)).or_insert(0.0) += amount;
        }
        Ok(())
    }

    pub fn summary(&self) -> LedgerSummary {
        let mut upload_totals = vec![0.0; self.n];
        let mut download_totals = vec![0.0; self.n];
        let mut total = 0.0;
        for (&(i, j), &a) in &self.entries {
            upload_totals[i] += a;
            download_totals[j] += a;
            total += a;
        }
        LedgerSummary {
            upload_totals,
            download_totals,
            total,
        }
    }

    /// Peers that downloaded something but never uploaded anything.
    pub fn free_riders(&self) -> BTreeSet<PeerId> {
        let s = self.summary();
        (0..self.n)
            .filter(|&i| s.upload_totals[i] == 0.0 && s.download_totals[i] > 0.0)
            .map(PeerId)
            .collect()
    }

    /// True iff every peer's upload total is within `tol` of its download total.
    pub fn is_balanced(&self, tol: f64) -> bool {
        let s = self.summary();
        s.upload_totals
            .iter()
            .zip(&s.download_totals)
            .all(|(up, down)| (up - down).abs() <= tol)
    }

    /// True iff the transaction digraph (edge i→j when s_ij > 0) is strongly connected.
    pub fn is_irreducible(&self) -> bool {
        let mut forward = vec![Vec::new(); self.n];
        let mut backward = vec![Vec::new(); self.n];
        for &(i, j) in self.entries.keys() {
            forward[i].push(j);
            backward[j].push(i);
        }
        reaches_all(&forward) && reaches_all(&backward)
    }

    pub fn load<R: Read>(reader: R, format: LedgerFormat) -> Result<Self, LedgerError> {
        match format {
            LedgerFormat::DenseCsv => load_dense_csv(reader),
            LedgerFormat::SparseJson => load_sparse_json(reader),
        }
    }

    pub fn save<W: Write>(&self, mut writer: W, format: LedgerFormat) -> Result<(), LedgerError> {
        match format {
            LedgerFormat::DenseCsv => {
                for row in self.to_dense() {
                    let line: Vec<String> = row.iter().map(|a| format!("{a:?}")).collect();
                    writeln!(writer, "{}", line.join(","))?;
                }
            }
            LedgerFormat::SparseJson => {
                let doc = SparseDoc {
                    n: self.n,
                    entries: self
                        .entries
                        .iter()
                        .map(|(&(from, to), &amount)| SparseEntry { from, to, amount })
                        .collect(),
                };
                serde_json::to_writer_pretty(&mut writer, &doc).map_err(std::io::Error::from)?;
                writeln!(writer)?;
            }
        }
        Ok(())
    }

    pub fn load_file(path: &std::path::Path, format: LedgerFormat) -> Result<Self, LedgerError> {
        let file = std::fs::File::open(path)?;
        Self::load(std::io::BufReader::new(file), format)
    }
}

fn check_amount(amount: f64) -> Result<(), LedgerError> {
    if !amount.is_finite() {
        return Err(LedgerError::NonFiniteAmount(amount));
    }
    if amount < 0.0 {
        return Err(LedgerError::NegativeAmount(amount));
    }
    Ok(())
}

fn reaches_all(adjacency: &[Vec<usize>]) -> bool {
    let n = adjacency.len();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &adjacency[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == n
}

#[derive(Serialize, Deserialize)]
struct SparseEntry {
    from: usize,
    to: usize,
    amount: f64,
}

#[derive(Serialize, Deserialize)]
struct SparseDoc {
    n: usize,
    entries: Vec<SparseEntry>,
}

fn load_dense_csv<R: Read>(reader: R) -> Result<ShareMatrix, LedgerError> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in csv.records() {
        let record = record.map_err(|e| LedgerError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            field: 0,
            message: e.to_string(),
        })?;
        let line = record.position().map_or(rows.len() as u64 + 1, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let mut row = Vec::with_capacity(record.len());
        for (field, cell) in record.iter().enumerate() {
            let amount: f64 = cell.parse().map_err(|_| LedgerError::Parse {
                line,
                field: field + 1,
                message: format!("expected a number, found {cell:?}"),
            })?;
            check_amount(amount)?;
            row.push(amount);
        }
        rows.push(row);
    }
    ShareMatrix::from_dense(&rows)
}

fn load_sparse_json<R: Read>(reader: R) -> Result<ShareMatrix, LedgerError> {
    let doc: SparseDoc = serde_json::from_reader(reader).map_err(|e| LedgerError::Parse {
        line: e.line() as u64,
        field: e.column(),
        message: e.to_string(),
    })?;
    let mut ledger = ShareMatrix::new(doc.n)?;
    for entry in doc.entries {
        ledger.record_transaction(PeerId(entry.from), PeerId(entry.to), entry.amount)?;
    }
    Ok(ledger)
}

/// The four-peer example ledger used throughout the docs and tests.
pub fn example_ledger() -> ShareMatrix {
    ShareMatrix::from_dense(&[
        vec![0.0, 100.0, 50.0, 20.0],
        vec![20.0, 0.0, 30.0, 40.0],
        vec![10.0, 40.0, 0.0, 50.0],
        vec![50.0, 10.0, 60.0, 0.0],
    ])
    .expect("example ledger is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(i: usize) -> PeerId {
        PeerId(i)
    }

    #[test]
    fn record_accumulates() {
        let mut l = ShareMatrix::new(4).unwrap();
        l.record_transaction(p(0), p(1), 100.0).unwrap();
        assert_eq!(l.get(p(0), p(1)), 100.0);
        l.record_transaction(p(0), p(1), 0.0).unwrap();
        assert_eq!(l.get(p(0), p(1)), 100.0);
        assert_eq!(l.nnz(), 1);
        l.record_transaction(p(0), p(1), 2.5).unwrap();
        assert_eq!(l.get(p(0), p(1)), 102.5);
    }

    #[test]
    fn zero_amount_on_empty_cell_stores_nothing() {
        let mut l = ShareMatrix::new(3).unwrap();
        l.record_transaction(p(0), p(1), 0.0).unwrap();
        assert_eq!(l, ShareMatrix::new(3).unwrap());
    }

    #[test]
    fn record_errors() {
        let mut l = ShareMatrix::new(4).unwrap();
        assert!(matches!(
            l.record_transaction(p(2), p(2), 5.0),
            Err(LedgerError::SelfTransaction(_))
        ));
        assert!(matches!(
            l.record_transaction(p(0), p(1), -1.0),
            Err(LedgerError::NegativeAmount(_))
        ));
        assert!(matches!(
            l.record_transaction(p(0), p(4), 1.0),
            Err(LedgerError::PeerOutOfRange { peer: 4, n: 4 })
        ));
        assert!(matches!(
            l.record_transaction(p(0), p(1), f64::NAN),
            Err(LedgerError::NonFiniteAmount(_))
        ));
        assert!(matches!(ShareMatrix::new(1), Err(LedgerError::TooFewPeers(1))));
    }

    #[test]
    fn example_summary() {
        let s = example_ledger().summary();
        assert_eq!(s.upload_totals, vec![170.0, 90.0, 100.0, 120.0]);
        assert_eq!(s.download_totals, vec![80.0, 150.0, 140.0, 110.0]);
        assert_eq!(s.total, 480.0);
    }

    #[test]
    fn free_rider_detection() {
        assert!(example_ledger().free_riders().is_empty());

        let mut dense = example_ledger().to_dense();
        dense[2] = vec![0.0; 4];
        let l = ShareMatrix::from_dense(&dense).unwrap();
        assert_eq!(l.free_riders(), BTreeSet::from([p(2)]));

        assert!(ShareMatrix::new(5).unwrap().free_riders().is_empty());
    }

    #[test]
    fn balance() {
        assert!(!example_ledger().is_balanced(0.0));
        assert!(!example_ledger().is_balanced(89.0));
        assert!(example_ledger().is_balanced(90.0));
        let l = ShareMatrix::from_dense(&[vec![0.0, 7.0], vec![7.0, 0.0]]).unwrap();
        assert!(l.is_balanced(0.0));
    }

    #[test]
    fn irreducibility() {
        assert!(example_ledger().is_irreducible());
        let mut dense = example_ledger().to_dense();
        dense[1] = vec![0.0; 4];
        assert!(!ShareMatrix::from_dense(&dense).unwrap().is_irreducible());
        let l = ShareMatrix::from_dense(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(!l.is_irreducible());
    }

    #[test]
    fn dense_csv_load() {
        let text = "0,100,50,20\n20,0,30,40\n10,40,0,50\n50,10,60,0\n";
        let l = ShareMatrix::load(text.as_bytes(), LedgerFormat::DenseCsv).unwrap();
        assert_eq!(l.get(p(0), p(1)), 100.0);
        assert_eq!(l, example_ledger());
    }

    #[test]
    fn dense_csv_errors() {
        let neg = "0,1\n-2,0\n";
        assert!(matches!(
            ShareMatrix::load(neg.as_bytes(), LedgerFormat::DenseCsv),
            Err(LedgerError::NegativeAmount(_))
        ));
        let ragged = "0,1,2\n1,0\n";
        assert!(matches!(
            ShareMatrix::load(ragged.as_bytes(), LedgerFormat::DenseCsv),
            Err(LedgerError::NonSquare {
                row: 0,
                found: 3,
                expected: 2
            })
        ));
        let junk = "0,1\n1,abc\n";
        match ShareMatrix::load(junk.as_bytes(), LedgerFormat::DenseCsv) {
            Err(LedgerError::Parse { line, field, .. }) => {
                assert_eq!((line, field), (2, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
        let diag = "1,1\n1,0\n";
        assert!(matches!(
            ShareMatrix::load(diag.as_bytes(), LedgerFormat::DenseCsv),
            Err(LedgerError::SelfTransaction(_))
        ));
    }

    #[test]
    fn sparse_json_load() {
        let l = ShareMatrix::load(r#"{"n": 3, "entries": []}"#.as_bytes(), LedgerFormat::SparseJson).unwrap();
        assert_eq!(l.n(), 3);
        assert_eq!(l.nnz(), 0);

        let dup = r#"{"n": 2, "entries": [{"from":0,"to":1,"amount":2},{"from":0,"to":1,"amount":3}]}"#;
        let l = ShareMatrix::load(dup.as_bytes(), LedgerFormat::SparseJson).unwrap();
        assert_eq!(l.get(p(0), p(1)), 5.0);

        let bad = r#"{"n": 2, "entries": [{"from":0,"to":1,"amount":-2}]}"#;
        assert!(matches!(
            ShareMatrix::load(bad.as_bytes(), LedgerFormat::SparseJson),
            Err(LedgerError::NegativeAmount(_))
        ));
        assert!(matches!(
            ShareMatrix::load("{\"n\": 2,".as_bytes(), LedgerFormat::SparseJson),
            Err(LedgerError::Parse { .. })
        ));
    }

    fn arb_ledger() -> impl Strategy<Value = ShareMatrix> {
        (2usize..12).prop_flat_map(|n| {
            proptest::collection::vec(proptest::option::weighted(0.4, 0.001f64..1e6), n * n).prop_map(
                move |cells| {
                    let rows: Vec<Vec<f64>> = (0..n)
                        .map(|i| {
                            (0..n)
                                .map(|j| {
                                    if i == j {
                                        0.0
                                    } else {
                                        cells[i * n + j].unwrap_or(0.0)
                                    }
                                })
                                .collect()
                        })
                        .collect();
                    ShareMatrix::from_dense(&rows).unwrap()
                },
            )
        })
    }

    proptest! {
        #[test]
        fn save_load_round_trip(l in arb_ledger()) {
            for format in [LedgerFormat::DenseCsv, LedgerFormat::SparseJson] {
                let mut buf = Vec::new();
                l.save(&mut buf, format).unwrap();
                let back = ShareMatrix::load(buf.as_slice(), format).unwrap();
                prop_assert_eq!(&back, &l);
            }
        }

        #[test]
        fn symmetric_is_balanced(l in arb_ledger()) {
            let dense = l.to_dense();
            let n = dense.len();
            let sym: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| dense[i][j].max(dense[j][i])).collect())
                .collect();
            prop_assert!(ShareMatrix::from_dense(&sym).unwrap().is_balanced(0.0));
        }

        #[test]
        fn free_riders_match_dense_scan(l in arb_ledger()) {
            let dense = l.to_dense();
            let n = dense.len();
            let expected: BTreeSet<PeerId> = (0..n)
                .filter(|&i| dense[i].iter().all(|&a| a == 0.0) && (0..n).any(|k| dense[k][i] != 0.0))
                .map(PeerId)
                .collect();
            prop_assert_eq!(l.free_riders(), expected);
        }

        #[test]
        fn totals_track_recorded_transactions(
            txs in proptest::collection::vec((0usize..6, 0usize..6, 0.0f64..50.0), 0..60)
        ) {
            let mut l = ShareMatrix::new(6).unwrap();
            let mut dense = vec![vec![0.0; 6]; 6];
            for (i, j, a) in txs {
                if i == j { continue; }
                l.record_transaction(PeerId(i), PeerId(j), a).unwrap();
                dense[i][j] += a;
            }
            let s = l.summary();
            for i in 0..6 {
                let row: f64 = dense[i].iter().sum();
                let col: f64 = dense.iter().map(|r| r[i]).sum();
                prop_assert!((s.upload_totals[i] - row).abs() <= 1e-9 * (1.0 + row));
                prop_assert!((s.download_totals[i] - col).abs() <= 1e-9 * (1.0 + col));
            }
            let up: f64 = s.upload_totals.iter().sum();
            let down: f64 = s.download_totals.iter().sum();
            prop_assert!((up - s.total).abs() <= 1e-9 * (1.0 + s.total));
            prop_assert!((down - s.total).abs() <= 1e-9 * (1.0 + s.total));
        }

        #[test]
        fn irreducible_matches_transitive_closure(l in arb_ledger()) {
            let n = l.n();
            let mut reach = vec![vec![false; n]; n];
            for (i, j, _) in l.entries() {
                reach[i.0][j.0] = true;
            }
            for (i, row) in reach.iter_mut().enumerate() {
                row[i] = true;
            }
            for k in 0..n {
                for i in 0..n {
                    for j in 0..n {
                        if reach[i][k] && reach[k][j] {
                            reach[i][j] = true;
                        }
                    }
                }
            }
            let oracle = reach.iter().all(|row| row.iter().all(|&r| r));
            prop_assert_eq!(l.is_irreducible(), oracle);
        }
    }
}
