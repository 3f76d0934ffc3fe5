//! Cell genotypes: 21 edge bits over the 7-node DAG, one operation per
//! intermediate node and a batch-size gene.
//!
//! Text form: `E:<21 x 0/1>|O:<5 x 0/1/2>|B:<0|1>`, edges ordered
//! lexicographically over node pairs `(i, j)`, `1 <= i < j <= 7`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

pub const NUM_NODES: usize = 7;
pub const NUM_EDGES: usize = 21;
pub const NUM_INTERMEDIATE: usize = 5;
pub const NUM_GENES: usize = NUM_EDGES + NUM_INTERMEDIATE + 1;
pub const MAX_EDGES: usize = 9;
const INPUT: usize = 0;
const OUTPUT: usize = NUM_NODES - 1;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum SpaceError {
    #[error("malformed genotype `{text}`: {reason}")]
    Parse { text: String, reason: String },
    #[error("gene {index} has value {value}, outside its alphabet of size {alphabet}")]
    Gene {
        index: usize,
        value: u8,
        alphabet: u8,
    },
    #[error("reduced space with {requested} nodes cannot be enumerated (supported: 2..={max})")]
    Capacity { requested: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CellOp {
    Conv3x3,
    MaxPool3x3,
    AvgPool3x3,
}

impl CellOp {
    pub const ALL: [CellOp; 3] = [CellOp::Conv3x3, CellOp::MaxPool3x3, CellOp::AvgPool3x3];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BatchSize {
    One,
    ThirtyTwo,
}

impl BatchSize {
    pub fn size(self) -> usize {
        match self {
            BatchSize::One => 1,
            BatchSize::ThirtyTwo => 32,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            BatchSize::One => 0,
            BatchSize::ThirtyTwo => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(BatchSize::One),
            1 => Some(BatchSize::ThirtyTwo),
            _ => None,
        }
    }
}

/// Alphabet size of each of the 27 genes.
pub fn gene_alphabets() -> [u8; NUM_GENES] {
    let mut a = [2u8; NUM_GENES];
    for g in a.iter_mut().skip(NUM_EDGES).take(NUM_INTERMEDIATE) {
        *g = 3;
    }
    a
}

/// Flat index of the edge between 0-based nodes `i < j`.
pub fn edge_index(i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < NUM_NODES);
    i * (2 * NUM_NODES - i - 1) / 2 + (j - i - 1)
}

/// The 0-based node pair of a flat edge index.
pub fn edge_pair(index: usize) -> (usize, usize) {
    let mut k = index;
    for i in 0..NUM_NODES - 1 {
        let row = NUM_NODES - 1 - i;
        if k < row {
            return (i, i + 1 + k);
        }
        k -= row;
    }
    panic!("edge index {index} out of range")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Genotype {
    edges: [bool; NUM_EDGES],
    ops: [CellOp; NUM_INTERMEDIATE],
    batch: BatchSize,
}

impl Genotype {
    pub fn new(edges: [bool; NUM_EDGES], ops: [CellOp; NUM_INTERMEDIATE], batch: BatchSize) -> Self {
        Genotype { edges, ops, batch }
    }

    /// Builds a genotype from 1-based node pairs.
    pub fn from_edges(pairs: &[(usize, usize)], ops: [CellOp; NUM_INTERMEDIATE], batch: BatchSize) -> Self {
        let mut edges = [false; NUM_EDGES];
        for &(i, j) in pairs {
            assert!(1 <= i && i < j && j <= NUM_NODES, "edge ({i},{j}) out of range");
            edges[edge_index(i - 1, j - 1)] = true;
        }
        Genotype { edges, ops, batch }
    }

    pub fn from_genes(genes: &[u8]) -> Result<Self, SpaceError> {
        if genes.len() != NUM_GENES {
            return Err(SpaceError::Parse {
                text: format!("{genes:?}"),
                reason: format!("expected {NUM_GENES} genes, got {}", genes.len()),
            });
        }
        let alphabets = gene_alphabets();
        for (index, (&value, &alphabet)) in genes.iter().zip(&alphabets).enumerate() {
            if value >= alphabet {
                return Err(SpaceError::Gene {
                    index,
                    value,
                    alphabet,
                });
            }
        }
        let mut edges = [false; NUM_EDGES];
        for (e, g) in edges.iter_mut().zip(genes) {
            *e = *g == 1;
        }
        let mut ops = [CellOp::Conv3x3; NUM_INTERMEDIATE];
        for (o, g) in ops.iter_mut().zip(&genes[NUM_EDGES..]) {
            *o = CellOp::from_code(*g).expect("checked against alphabet");
        }
        let batch = BatchSize::from_code(genes[NUM_GENES - 1]).expect("checked against alphabet");
        Ok(Genotype { edges, ops, batch })
    }

    pub fn genes(&self) -> [u8; NUM_GENES] {
        let mut g = [0u8; NUM_GENES];
        for (i, &e) in self.edges.iter().enumerate() {
            g[i] = e as u8;
        }
        for (i, op) in self.ops.iter().enumerate() {
            g[NUM_EDGES + i] = op.code();
        }
        g[NUM_GENES - 1] = self.batch.code();
        g
    }

    /// Genes scaled to `[0, 1]` per alphabet, the surrogate's coordinates.
    pub fn to_unit_vector(&self) -> Vec<f64> {
        self.genes()
            .iter()
            .zip(gene_alphabets())
            .map(|(&g, a)| g as f64 / (a - 1) as f64)
            .collect()
    }

    pub fn edges(&self) -> &[bool; NUM_EDGES] {
        &self.edges
    }

    pub fn ops(&self) -> &[CellOp; NUM_INTERMEDIATE] {
        &self.ops
    }

    pub fn batch(&self) -> BatchSize {
        self.batch
    }

    pub fn with_batch(mut self, batch: BatchSize) -> Self {
        self.batch = batch;
        self
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().filter(|&&e| e).count()
    }

    /// Uniform over every gene's alphabet, genes independent.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let alphabets = gene_alphabets();
        let genes: Vec<u8> = alphabets.iter().map(|&a| rng.random_range(0..a)).collect();
        Self::from_genes(&genes).expect("sampled within alphabets")
    }

    pub fn decode(&self) -> CellGraph {
        CellGraph::from_genotype(self)
    }
}

/// Reproducible uniform genotype for a seed.
pub fn sample_uniform(seed: u64) -> Genotype {
    Genotype::random(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Number of distinct genotypes: `2^21 * 3^5 * 2`.
pub fn space_size() -> u64 {
    gene_alphabets().iter().map(|&a| a as u64).product()
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let g = self.genes();
        let e: String = g[..NUM_EDGES].iter().map(|v| char::from(b'0' + v)).collect();
        let o: String = g[NUM_EDGES..NUM_GENES - 1]
            .iter()
            .map(|v| char::from(b'0' + v))
            .collect();
        write!(f, "E:{}|O:{}|B:{}", e, o, g[NUM_GENES - 1])
    }
}

impl FromStr for Genotype {
    type Err = SpaceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fail = |reason: &str| SpaceError::Parse {
            text: s.to_string(),
            reason: reason.to_string(),
        };
        let mut parts = s.split('|');
        let (Some(e), Some(o), Some(b), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(fail("expected three `|`-separated fields"));
        };
        let e = e.strip_prefix("E:").ok_or_else(|| fail("missing `E:` field"))?;
        let o = o.strip_prefix("O:").ok_or_else(|| fail("missing `O:` field"))?;
        let b = b.strip_prefix("B:").ok_or_else(|| fail("missing `B:` field"))?;
        if e.len() != NUM_EDGES || o.len() != NUM_INTERMEDIATE || b.len() != 1 {
            return Err(fail("field lengths must be 21, 5 and 1"));
        }
        let mut genes = Vec::with_capacity(NUM_GENES);
        for c in e.bytes().chain(o.bytes()).chain(b.bytes()) {
            if !c.is_ascii_digit() {
                return Err(fail("genes must be decimal digits"));
            }
            genes.push(c - b'0');
        }
        Genotype::from_genes(&genes)
    }
}

impl Serialize for Genotype {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Genotype {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Decoded cell DAG over nodes 0 (input) .. 6 (output).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellGraph {
    adjacency: [[bool; NUM_NODES]; NUM_NODES],
    ops: [CellOp; NUM_INTERMEDIATE],
    batch: BatchSize,
    on_path: [bool; NUM_NODES],
    edge_count: usize,
}

impl CellGraph {
    fn from_genotype(g: &Genotype) -> Self {
        let mut adjacency = [[false; NUM_NODES]; NUM_NODES];
        for (k, &e) in g.edges.iter().enumerate() {
            if e {
                let (i, j) = edge_pair(k);
                adjacency[i][j] = true;
            }
        }
        let forward = reach(&adjacency, INPUT, false);
        let backward = reach(&adjacency, OUTPUT, true);
        let mut on_path = [false; NUM_NODES];
        for v in 0..NUM_NODES {
            on_path[v] = forward[v] && backward[v];
        }
        CellGraph {
            adjacency,
            ops: g.ops,
            batch: g.batch,
            on_path,
            edge_count: g.edge_count(),
        }
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i][j]
    }

    pub fn adjacency(&self) -> &[[bool; NUM_NODES]; NUM_NODES] {
        &self.adjacency
    }

    /// Operation of 0-based node `v` (1..=5).
    pub fn op(&self, v: usize) -> CellOp {
        self.ops[v - 1]
    }

    pub fn batch(&self) -> BatchSize {
        self.batch
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn has_io_path(&self) -> bool {
        self.on_path[OUTPUT]
    }

    pub fn predecessors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        (0..v).filter(move |&u| self.adjacency[u][v])
    }

    pub fn degree(&self, v: usize) -> usize {
        (0..NUM_NODES)
            .filter(|&u| self.adjacency[u][v] || self.adjacency[v][u])
            .count()
    }

    /// Intermediate nodes lying on some input-to-output path.
    pub fn active_intermediates(&self) -> Vec<usize> {
        (1..OUTPUT).filter(|&v| self.on_path[v]).collect()
    }

    pub fn is_on_path(&self, v: usize) -> bool {
        self.on_path[v]
    }

    pub fn validate(&self, cfg: &PenaltyConfig) -> ValidityReport {
        let has_io_path = self.has_io_path();
        let kappa = if has_io_path {
            (1..OUTPUT)
                .filter(|&v| !self.on_path[v] && self.degree(v) > 0)
                .count()
        } else {
            NO_PATH_KAPPA
        };
        let penalty = if self.edge_count > MAX_EDGES {
            (self.edge_count - MAX_EDGES) as f64 * cfg.edge_excess
        } else {
            kappa as f64 * cfg.dangling_node
        };
        ValidityReport {
            edge_count: self.edge_count,
            has_io_path,
            kappa,
            penalty,
        }
    }
}

fn reach(adj: &[[bool; NUM_NODES]; NUM_NODES], start: usize, reverse: bool) -> [bool; NUM_NODES] {
    let mut seen = [false; NUM_NODES];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(u) = stack.pop() {
        for v in 0..NUM_NODES {
            let e = if reverse { adj[v][u] } else { adj[u][v] };
            if e && !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen
}

/// Dangling-node count charged when the output is unreachable from the input.
pub const NO_PATH_KAPPA: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyConfig {
    /// Charged per edge above the limit of 9.
    pub edge_excess: f64,
    /// Charged per node that is wired in but off every input-output path.
    pub dangling_node: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            edge_excess: 1e6,
            dangling_node: 1e6,
        }
    }
}

/// Cost offset added to the penalty of genotypes that are never trained.
pub const INVALID_COST_OFFSET: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub edge_count: usize,
    pub has_io_path: bool,
    pub kappa: usize,
    pub penalty: f64,
}

impl ValidityReport {
    pub fn is_valid(&self) -> bool {
        self.penalty == 0.0
    }

    /// Reported cost of an untrained invalid genotype.
    pub fn sentinel_cost(&self) -> f64 {
        INVALID_COST_OFFSET + self.penalty
    }
}

/// Isomorphism-invariant key of a cell: two genotypes share a key exactly
/// when a relabeling of intermediate nodes maps one onto the other.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CanonicalKey(String);

impl CanonicalKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CanonicalKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl CellGraph {
    pub fn canonical_form(&self) -> CanonicalKey {
        let colors = self.refined_colors();

        // Intermediates grouped by color; ties are resolved by trying every
        // ordering within each group and keeping the smallest encoding.
        let mut inter: Vec<usize> = (1..OUTPUT).collect();
        inter.sort_by_key(|&v| colors[v]);
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for v in inter {
            match groups.last_mut() {
                Some(g) if colors[g[0]] == colors[v] => g.push(v),
                _ => groups.push(vec![v]),
            }
        }

        let mut best: Option<(u64, [u8; NUM_INTERMEDIATE])> = None;
        let mut order = Vec::with_capacity(NUM_INTERMEDIATE);
        self.search_orderings(&groups, 0, &mut order, &mut best);
        let (adj, ops) = best.expect("at least one ordering");
        let ops: String = ops.iter().map(|o| char::from(b'0' + o)).collect();
        CanonicalKey(format!("{:013x}-{}-{}", adj, ops, self.batch.code()))
    }

    fn search_orderings(
        &self,
        groups: &[Vec<usize>],
        depth: usize,
        order: &mut Vec<usize>,
        best: &mut Option<(u64, [u8; NUM_INTERMEDIATE])>,
    ) {
        if depth == groups.len() {
            let enc = self.encode_under(order);
            if best.as_ref().is_none_or(|b| enc < *b) {
                *best = Some(enc);
            }
            return;
        }
        for perm in permutations(&groups[depth]) {
            let base = order.len();
            order.extend_from_slice(&perm);
            self.search_orderings(groups, depth + 1, order, best);
            order.truncate(base);
        }
    }

    /// Adjacency bits and op codes with intermediates relabeled so that
    /// `order[k]` becomes node `k + 1`.
    fn encode_under(&self, order: &[usize]) -> (u64, [u8; NUM_INTERMEDIATE]) {
        let mut label = [0usize; NUM_NODES];
        label[INPUT] = INPUT;
        label[OUTPUT] = OUTPUT;
        for (k, &v) in order.iter().enumerate() {
            label[v] = k + 1;
        }
        let mut relabeled = [[false; NUM_NODES]; NUM_NODES];
        for u in 0..NUM_NODES {
            for v in 0..NUM_NODES {
                if self.adjacency[u][v] {
                    relabeled[label[u]][label[v]] = true;
                }
            }
        }
        let mut bits = 0u64;
        for row in &relabeled {
            for &b in row {
                bits = (bits << 1) | b as u64;
            }
        }
        let mut ops = [0u8; NUM_INTERMEDIATE];
        for &v in order {
            ops[label[v] - 1] = self.op(v).code();
        }
        (bits, ops)
    }

    /// Color refinement seeded by node role and operation.
    fn refined_colors(&self) -> [usize; NUM_NODES] {
        let mut colors = [0usize; NUM_NODES];
        colors[OUTPUT] = 1;
        for v in 1..OUTPUT {
            colors[v] = 2 + self.op(v).code() as usize;
        }
        let mut classes = distinct(&colors);
        loop {
            let sigs: Vec<(usize, Vec<usize>, Vec<usize>)> = (0..NUM_NODES)
                .map(|v| {
                    let mut ins: Vec<usize> = (0..NUM_NODES)
                        .filter(|&u| self.adjacency[u][v])
                        .map(|u| colors[u])
                        .collect();
                    let mut outs: Vec<usize> = (0..NUM_NODES)
                        .filter(|&u| self.adjacency[v][u])
                        .map(|u| colors[u])
                        .collect();
                    ins.sort_unstable();
                    outs.sort_unstable();
                    (colors[v], ins, outs)
                })
                .collect();
            let ranked: Vec<_> = sigs.iter().collect::<BTreeSet<_>>().into_iter().collect();
            let mut next = [0usize; NUM_NODES];
            for v in 0..NUM_NODES {
                next[v] = ranked.binary_search(&&sigs[v]).expect("present");
            }
            let n = distinct(&next);
            colors = next;
            if n == classes {
                return colors;
            }
            classes = n;
        }
    }
}

fn distinct(colors: &[usize]) -> usize {
    colors.iter().collect::<BTreeSet<_>>().len()
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

impl Genotype {
    pub fn canonical_key(&self) -> CanonicalKey {
        self.decode().canonical_form()
    }
}

/// Largest reduced space [`enumerate_reduced`] will produce.
pub const MAX_REDUCED_NODES: usize = 5;

/// Every genotype of the sub-space that only uses the input, the first
/// `max_nodes - 2` intermediates and the output. Unused intermediates keep
/// op 0 and the batch gene is fixed to 0.
pub fn enumerate_reduced(max_nodes: usize) -> Result<ReducedSpace, SpaceError> {
    if !(2..=MAX_REDUCED_NODES).contains(&max_nodes) {
        return Err(SpaceError::Capacity {
            requested: max_nodes,
            max: MAX_REDUCED_NODES,
        });
    }
    let mut nodes: Vec<usize> = (0..max_nodes - 1).collect();
    nodes.push(OUTPUT);
    let mut edges = Vec::new();
    for a in 0..nodes.len() {
        for b in a + 1..nodes.len() {
            edges.push(edge_index(nodes[a], nodes[b]));
        }
    }
    let op_slots = max_nodes - 2;
    let total = (1u64 << edges.len()) * 3u64.pow(op_slots as u32);
    Ok(ReducedSpace {
        edges,
        op_slots,
        next: 0,
        total,
    })
}

#[derive(Debug, Clone)]
pub struct ReducedSpace {
    edges: Vec<usize>,
    op_slots: usize,
    next: u64,
    total: u64,
}

impl ReducedSpace {
    pub fn total(&self) -> u64 {
        self.total
    }
}

impl Iterator for ReducedSpace {
    type Item = Genotype;

    fn next(&mut self) -> Option<Genotype> {
        if self.next >= self.total {
            return None;
        }
        let mut code = self.next;
        self.next += 1;
        let mut genes = [0u8; NUM_GENES];
        for &e in &self.edges {
            genes[e] = (code & 1) as u8;
            code >>= 1;
        }
        for slot in 0..self.op_slots {
            genes[NUM_EDGES + slot] = (code % 3) as u8;
            code /= 3;
        }
        Some(Genotype::from_genes(&genes).expect("within alphabets"))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.total - self.next) as usize;
        (n, Some(n))
    }
}
