//! Graphs, cellular sheaves, the coboundary operator, sheaf Laplacians,
//! degree blocks, the normalized Laplacian, and direct sums of sheaves.
//!
//! A cellular sheaf attaches a d-dimensional stalk to every node and a pair
//! of restriction maps (F_{u⊴e}, F_{v⊴e}) to every edge e=(u,v). Edges are
//! stored with the canonical orientation u<v, which fixes the sign convention
//! of the coboundary: (δx)_e = F_{v⊴e}x_v − F_{u⊴e}x_u. The Laplacian
//! L_F = δᵀδ and its degree-normalized form are kept block-sparse.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::rotations::Rotation;
use crate::scalar::Real;

/// Undirected graph with node features and class labels.
#[derive(Clone, Debug)]
pub struct Graph<S> {
    n: usize,
    edges: Vec<(usize, usize)>,
    features: Matrix<S>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl<S: Real> Graph<S> {
    /// Edges must be canonical (u < v), self-loop free, and duplicate free;
    /// they are stored sorted. Features are n×m, labels in {0..C−1}.
    pub fn new(
        n: usize,
        mut edges: Vec<(usize, usize)>,
        features: Matrix<S>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        for &(u, v) in &edges {
            if u >= v {
                return Err(Error::Contract(format!(
                    "edge ({u},{v}) is not in canonical order u<v (self-loops forbidden)"
                )));
            }
            if v >= n {
                return Err(Error::Contract(format!("edge ({u},{v}) references node >= n={n}")));
            }
        }
        edges.sort_unstable();
        if edges.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("duplicate edge".into()));
        }
        if features.rows() != n {
            return Err(Error::Contract(format!(
                "feature matrix has {} rows, expected n={n}",
                features.rows()
            )));
        }
        if !features.all_finite() {
            return Err(Error::Contract("features must be finite".into()));
        }
        if labels.len() != n {
            return Err(Error::Contract(format!(
                "labels length {} does not match n={n}",
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::Contract("need at least one class".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Graph { n, edges, features, labels, num_classes })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Matrix<S> {
        &self.features
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn degree(&self, u: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == u || b == u).count()
    }
}

/// Family a sheaf's restriction maps are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    Diagonal,
    SpecialOrthogonal,
    General,
}

/// One restriction map F_{u⊴e}: a d×d linear map in one of three families.
#[derive(Clone, Debug)]
pub enum RestrictionMap<S> {
    /// Nonzero diagonal entries.
    Diagonal(Vec<S>),
    SpecialOrthogonal(Rotation<S>),
    /// Arbitrary finite d×d matrix.
    General(Matrix<S>),
}

impl<S: Real> RestrictionMap<S> {
    pub fn diagonal(entries: Vec<S>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Contract("diagonal restriction map needs d >= 1".into()));
        }
        if entries.iter().any(|x| !x.is_finite() || *x == S::zero()) {
            return Err(Error::Contract("diagonal entries must be finite and nonzero".into()));
        }
        Ok(RestrictionMap::Diagonal(entries))
    }

    pub fn general(m: Matrix<S>) -> Result<Self> {
        if !m.is_square() || m.rows() == 0 {
            return Err(Error::Contract("general restriction map must be square d>=1".into()));
        }
        if !m.all_finite() {
            return Err(Error::Contract("restriction map entries must be finite".into()));
        }
        Ok(RestrictionMap::General(m))
    }

    pub fn kind(&self) -> MapKind {
        match self {
            RestrictionMap::Diagonal(_) => MapKind::Diagonal,
            RestrictionMap::SpecialOrthogonal(_) => MapKind::SpecialOrthogonal,
            RestrictionMap::General(_) => MapKind::General,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            RestrictionMap::Diagonal(d) => d.len(),
            RestrictionMap::SpecialOrthogonal(r) => r.dim(),
            RestrictionMap::General(m) => m.rows(),
        }
    }

    /// Dense d×d form.
    pub fn to_matrix(&self) -> Matrix<S> {
        match self {
            RestrictionMap::Diagonal(d) => Matrix::diag(d),
            RestrictionMap::SpecialOrthogonal(r) => r.matrix().clone(),
            RestrictionMap::General(m) => m.clone(),
        }
    }
}

/// A cellular sheaf over a graph: stalk dimension d and, for each edge
/// e=(u,v) in storage order, the ordered map pair (F_{u⊴e}, F_{v⊴e}).
#[derive(Clone, Debug)]
pub struct CellularSheaf<S> {
    graph: Arc<Graph<S>>,
    d: usize,
    maps: Vec<(RestrictionMap<S>, RestrictionMap<S>)>,
}

impl<S: Real> CellularSheaf<S> {
    pub fn new(
        graph: Arc<Graph<S>>,
        d: usize,
        maps: Vec<(RestrictionMap<S>, RestrictionMap<S>)>,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::Contract("stalk dimension must be >= 1".into()));
        }
        if maps.len() != graph.num_edges() {
            return Err(Error::Contract(format!(
                "need one map pair per edge: {} pairs for {} edges",
                maps.len(),
                graph.num_edges()
            )));
        }
        let kind = match maps.first() {
            Some((f, _)) => f.kind(),
            None => MapKind::General,
        };
        for (fu, fv) in &maps {
            for f in [fu, fv] {
                if f.dim() != d {
                    return Err(Error::Contract(format!(
                        "restriction map dimension {} != stalk dimension {d}",
                        f.dim()
                    )));
                }
                if f.kind() != kind {
                    return Err(Error::Contract("restriction map kinds must be uniform".into()));
                }
            }
        }
        Ok(CellularSheaf { graph, d, maps })
    }

    /// The sheaf whose every restriction map is I_d.
    pub fn identity(graph: Arc<Graph<S>>, d: usize) -> Result<Self> {
        let id = || RestrictionMap::SpecialOrthogonal(Rotation::identity(d));
        let maps = (0..graph.num_edges()).map(|_| (id(), id())).collect();
        CellularSheaf::new(graph, d, maps)
    }

    pub fn graph(&self) -> &Arc<Graph<S>> {
        &self.graph
    }

    pub fn stalk_dim(&self) -> usize {
        self.d
    }

    pub fn maps(&self) -> &[(RestrictionMap<S>, RestrictionMap<S>)] {
        &self.maps
    }

    pub fn kind(&self) -> MapKind {
        self.maps.first().map(|(f, _)| f.kind()).unwrap_or(MapKind::General)
    }
}

/// Block-sparse nd×nd operator: d×d blocks keyed by (block row, block col).
/// Absent blocks are zero.
#[derive(Clone, Debug)]
pub struct BlockOperator<S> {
    n: usize,
    d: usize,
    blocks: BTreeMap<(usize, usize), Matrix<S>>,
}

impl<S: Real> BlockOperator<S> {
    pub fn zero(n: usize, d: usize) -> Self {
        BlockOperator { n, d, blocks: BTreeMap::new() }
    }

    pub fn num_blocks_per_side(&self) -> usize {
        self.n
    }

    pub fn block_size(&self) -> usize {
        self.d
    }

    pub fn side(&self) -> usize {
        self.n * self.d
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&Matrix<S>> {
        self.blocks.get(&(i, j))
    }

    pub fn set(&mut self, i: usize, j: usize, block: Matrix<S>) {
        assert!(i < self.n && j < self.n, "block index out of range");
        assert!(block.rows() == self.d && block.cols() == self.d, "block shape mismatch");
        self.blocks.insert((i, j), block);
    }

    /// Adds into an existing block (creating it if absent).
    pub fn accumulate(&mut self, i: usize, j: usize, block: &Matrix<S>) {
        assert!(i < self.n && j < self.n, "block index out of range");
        assert!(block.rows() == self.d && block.cols() == self.d, "block shape mismatch");
        match self.blocks.get_mut(&(i, j)) {
            Some(b) => *b = b.add(block),
            None => {
                self.blocks.insert((i, j), block.clone());
            }
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&(usize, usize), &Matrix<S>)> {
        self.blocks.iter()
    }

    /// Checks block(i,j) = block(j,i)ᵀ within tol, treating absent blocks as
    /// zero.
    pub fn is_block_symmetric(&self, tol: S) -> bool {
        self.blocks.iter().all(|(&(i, j), b)| {
            let tb = match self.blocks.get(&(j, i)) {
                Some(t) => t.transpose(),
                None => Matrix::zeros(self.d, self.d),
            };
            b.sub(&tb).max_abs() <= tol
        })
    }

    /// Dense nd×nd materialization (tests, eigendecomposition).
    pub fn to_dense(&self) -> Matrix<S> {
        let mut out = Matrix::zeros(self.side(), self.side());
        for (&(i, j), b) in &self.blocks {
            out.set_block(i * self.d, j * self.d, b);
        }
        out
    }

    /// Applies the operator to an nd×f stacked feature matrix.
    pub fn apply_dense(&self, x: &Matrix<S>) -> Matrix<S> {
        assert_eq!(x.rows(), self.side(), "row count must be n·d");
        let f = x.cols();
        let mut out = Matrix::zeros(self.side(), f);
        for (&(i, j), b) in &self.blocks {
            // out[i-block] += B · x[j-block]
            for r in 0..self.d {
                for k in 0..self.d {
                    let w = b[(r, k)];
                    if w == S::zero() {
                        continue;
                    }
                    for c in 0..f {
                        out[(i * self.d + r, c)] += w * x[(j * self.d + k, c)];
                    }
                }
            }
        }
        out
    }
}

/// Coboundary matrix δ of shape |E|d × nd: the row block of edge e=(u,v)
/// holds −F_{u⊴e} in u's column block and +F_{v⊴e} in v's.
pub fn build_coboundary<S: Real>(sheaf: &CellularSheaf<S>) -> Matrix<S> {
    let d = sheaf.stalk_dim();
    let g = sheaf.graph();
    let mut delta = Matrix::zeros(g.num_edges() * d, g.num_nodes() * d);
    for (e, (&(u, v), (fu, fv))) in g.edges().iter().zip(sheaf.maps()).enumerate() {
        delta.add_block(e * d, u * d, &fu.to_matrix(), -S::one());
        delta.add_block(e * d, v * d, &fv.to_matrix(), S::one());
    }
    delta
}

/// Sheaf Laplacian L_F = δᵀδ assembled blockwise:
/// L_uu = Σ_{u⊴e} F_{u⊴e}ᵀF_{u⊴e} and, for e=(u,v), L_uv = −F_{u⊴e}ᵀF_{v⊴e}.
pub fn sheaf_laplacian<S: Real>(sheaf: &CellularSheaf<S>) -> BlockOperator<S> {
    let d = sheaf.stalk_dim();
    let g = sheaf.graph();
    let mut l = BlockOperator::zero(g.num_nodes(), d);
    for (&(u, v), (fu, fv)) in g.edges().iter().zip(sheaf.maps()) {
        let mu = fu.to_matrix();
        let mv = fv.to_matrix();
        l.accumulate(u, u, &mu.transpose().matmul(&mu));
        l.accumulate(v, v, &mv.transpose().matmul(&mv));
        let luv = mu.transpose().matmul(&mv).scale(-S::one());
        l.accumulate(u, v, &luv);
        l.accumulate(v, u, &luv.transpose());
    }
    l
}

/// Block-diagonal degree operator: the diagonal blocks of L, zero elsewhere.
/// Isolated nodes get an explicit zero block.
pub fn degree_blocks<S: Real>(l: &BlockOperator<S>) -> BlockOperator<S> {
    let (n, d) = (l.num_blocks_per_side(), l.block_size());
    let mut out = BlockOperator::zero(n, d);
    for i in 0..n {
        let block = l.get(i, i).cloned().unwrap_or_else(|| Matrix::zeros(d, d));
        out.set(i, i, block);
    }
    out
}

/// Normalized Laplacian Δ_F = D^{−1/2} L D^{−1/2}. Each diagonal block of D
/// is inverted through its eigendecomposition with eigenvalues floored at
/// eps; with eps = 0 a nonpositive eigenvalue is a hard error.
pub fn normalized_laplacian<S: Real>(
    l: &BlockOperator<S>,
    deg: &BlockOperator<S>,
    eps: S,
) -> Result<BlockOperator<S>> {
    let (n, d) = (l.num_blocks_per_side(), l.block_size());
    if deg.num_blocks_per_side() != n || deg.block_size() != d {
        return Err(Error::Contract("operator shapes do not match".into()));
    }
    if eps < S::zero() {
        return Err(Error::Contract("eigenvalue floor must be nonnegative".into()));
    }
    if deg.blocks().any(|(&(i, j), b)| i != j && b.max_abs() > S::zero()) {
        return Err(Error::Contract("degree operator must be block-diagonal".into()));
    }

    let mut inv_sqrt: Vec<Matrix<S>> = Vec::with_capacity(n);
    for i in 0..n {
        let block = deg.get(i, i).cloned().unwrap_or_else(|| Matrix::zeros(d, d));
        inv_sqrt.push(inverse_sqrt_psd(&block, eps)?);
    }

    let mut out = BlockOperator::zero(n, d);
    for (&(i, j), b) in l.blocks() {
        out.set(i, j, inv_sqrt[i].matmul(b).matmul(&inv_sqrt[j]));
    }
    Ok(out)
}

/// B^{−1/2} for a symmetric PSD block, with eigenvalues floored at eps.
pub fn inverse_sqrt_psd<S: Real>(block: &Matrix<S>, eps: S) -> Result<Matrix<S>> {
    let eig = linalg::sym_eig(block)?;
    let d = block.rows();
    let mut scaled = Matrix::zeros(d, d);
    for (k, &lam) in eig.values.iter().enumerate() {
        let floored = lam.max(eps);
        if floored <= S::zero() {
            return Err(Error::Singular(format!(
                "degree block has nonpositive eigenvalue {lam} and the floor is 0"
            )));
        }
        let w = floored.sqrt().recip();
        for r in 0..d {
            scaled[(r, k)] = eig.vectors[(r, k)] * w;
        }
    }
    Ok(scaled.matmul(&eig.vectors.transpose()))
}

/// Direct sum of sheaves over one graph, padded with an m-dimensional
/// identity summand: every restriction map becomes
/// F¹ ⊕ … ⊕ Fᵏ ⊕ I_m, with stalk dimension Σd_i + m.
pub fn direct_sum_sheaf<S: Real>(
    sheaves: &[CellularSheaf<S>],
    pad: usize,
) -> Result<CellularSheaf<S>> {
    let first = sheaves
        .first()
        .ok_or_else(|| Error::Contract("direct sum needs at least one sheaf".into()))?;
    let graph = first.graph().clone();
    let kind = first.kind();
    for s in sheaves {
        let same = Arc::ptr_eq(s.graph(), &graph)
            || (s.graph().num_nodes() == graph.num_nodes() && s.graph().edges() == graph.edges());
        if !same {
            return Err(Error::Contract("direct sum requires sheaves over the same graph".into()));
        }
        if s.kind() != kind {
            return Err(Error::Contract("direct sum requires a uniform map kind".into()));
        }
    }
    let d_total: usize = sheaves.iter().map(|s| s.stalk_dim()).sum::<usize>() + pad;
    if d_total == 0 {
        return Err(Error::Contract("direct sum would have stalk dimension 0".into()));
    }

    let mut maps = Vec::with_capacity(graph.num_edges());
    for e in 0..graph.num_edges() {
        let mut pair = Vec::with_capacity(2);
        for side in 0..2 {
            let parts: Vec<&RestrictionMap<S>> = sheaves
                .iter()
                .map(|s| if side == 0 { &s.maps()[e].0 } else { &s.maps()[e].1 })
                .collect();
            pair.push(direct_sum_map(&parts, pad, d_total, kind)?);
        }
        let fv = pair.pop().expect("two sides");
        let fu = pair.pop().expect("two sides");
        maps.push((fu, fv));
    }
    CellularSheaf::new(graph, d_total, maps)
}

fn direct_sum_map<S: Real>(
    parts: &[&RestrictionMap<S>],
    pad: usize,
    d_total: usize,
    kind: MapKind,
) -> Result<RestrictionMap<S>> {
    match kind {
        MapKind::Diagonal => {
            let mut entries = Vec::with_capacity(d_total);
            for p in parts {
                match p {
                    RestrictionMap::Diagonal(d) => entries.extend_from_slice(d),
                    _ => unreachable!("kind uniformity checked by caller"),
                }
            }
            entries.extend(std::iter::repeat(S::one()).take(pad));
            RestrictionMap::diagonal(entries)
        }
        _ => {
            let mut dense = Matrix::identity(d_total);
            let mut off = 0;
            for p in parts {
                dense.set_block(off, off, &p.to_matrix());
                off += p.dim();
            }
            match kind {
                MapKind::SpecialOrthogonal => {
                    Ok(RestrictionMap::SpecialOrthogonal(Rotation::new(dense)?))
                }
                _ => RestrictionMap::general(dense),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    type M = Matrix<f64>;

    fn bare_graph(n: usize, edges: Vec<(usize, usize)>) -> Arc<Graph<f64>> {
        Arc::new(Graph::new(n, edges, M::zeros(n, 0), vec![0; n], 1).unwrap())
    }

    fn scalar_sheaf(n: usize, edges: Vec<(usize, usize)>) -> CellularSheaf<f64> {
        CellularSheaf::identity(bare_graph(n, edges), 1).unwrap()
    }

    #[test]
    fn graph_rejects_bad_edges() {
        let mk = |edges: Vec<(usize, usize)>| {
            Graph::new(3, edges, M::zeros(3, 0), vec![0; 3], 1).map(|_| ())
        };
        assert!(mk(vec![(1, 1)]).is_err());
        assert!(mk(vec![(2, 1)]).is_err());
        assert!(mk(vec![(0, 3)]).is_err());
        assert!(mk(vec![(0, 1), (0, 1)]).is_err());
        assert!(mk(vec![(1, 2), (0, 1)]).is_ok());
    }

    #[test]
    fn coboundary_single_edge_scalar() {
        let delta = build_coboundary(&scalar_sheaf(2, vec![(0, 1)]));
        assert_eq!(delta, M::from_rows(&[vec![-1.0, 1.0]]));
    }

    #[test]
    fn coboundary_single_edge_d2() {
        let sheaf = CellularSheaf::identity(bare_graph(2, vec![(0, 1)]), 2).unwrap();
        let delta = build_coboundary(&sheaf);
        let want = M::from_rows(&[vec![-1.0, 0.0, 1.0, 0.0], vec![0.0, -1.0, 0.0, 1.0]]);
        assert_eq!(delta, want);
    }

    #[test]
    fn coboundary_edgeless() {
        let delta = build_coboundary(&scalar_sheaf(3, vec![]));
        assert_eq!(delta.rows(), 0);
        assert_eq!(delta.cols(), 3);
    }

    #[test]
    fn laplacian_single_edge_scalar() {
        let l = sheaf_laplacian(&scalar_sheaf(2, vec![(0, 1)]));
        assert_eq!(l.to_dense(), M::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]));
    }

    #[test]
    fn laplacian_identity_sheaf_is_graph_laplacian() {
        // Triangle plus a pendant node.
        let edges = vec![(0, 1), (0, 2), (1, 2), (2, 3)];
        let l = sheaf_laplacian(&scalar_sheaf(4, edges.clone()));
        let mut want = M::zeros(4, 4);
        for (u, v) in edges {
            want[(u, u)] += 1.0;
            want[(v, v)] += 1.0;
            want[(u, v)] -= 1.0;
            want[(v, u)] -= 1.0;
        }
        assert_eq!(l.to_dense(), want);
    }

    #[test]
    fn laplacian_single_edge_d2_blocks() {
        let sheaf = CellularSheaf::identity(bare_graph(2, vec![(0, 1)]), 2).unwrap();
        let l = sheaf_laplacian(&sheaf);
        assert_eq!(l.get(0, 0).unwrap(), &M::identity(2));
        assert_eq!(l.get(1, 1).unwrap(), &M::identity(2));
        assert_eq!(l.get(0, 1).unwrap(), &M::identity(2).scale(-1.0));
        assert_eq!(l.get(1, 0).unwrap(), &M::identity(2).scale(-1.0));
    }

    #[test]
    fn laplacian_matches_coboundary_gram() {
        let mut rng = ChaCha20Rng::seed_from_u64(40);
        let graph = bare_graph(5, vec![(0, 1), (0, 4), (1, 2), (2, 3), (3, 4), (1, 4)]);
        let d = 3;
        let maps = (0..graph.num_edges())
            .map(|_| {
                let mk = |rng: &mut ChaCha20Rng| {
                    RestrictionMap::general(M::from_fn(d, d, |_, _| {
                        rand::Rng::random_range(rng, -1.0..1.0)
                    }))
                    .unwrap()
                };
                (mk(&mut rng), mk(&mut rng))
            })
            .collect();
        let sheaf = CellularSheaf::new(graph, d, maps).unwrap();
        let delta = build_coboundary(&sheaf);
        let gram = delta.transpose().matmul(&delta);
        let l = sheaf_laplacian(&sheaf);
        assert!(l.to_dense().sub(&gram).max_abs() < 1e-10);
        assert!(l.is_block_symmetric(1e-12));
    }

    #[test]
    fn degree_blocks_examples() {
        let l = sheaf_laplacian(&scalar_sheaf(2, vec![(0, 1)]));
        let d = degree_blocks(&l);
        assert_eq!(d.to_dense(), M::identity(2));

        // Node 2 isolated: explicit zero block.
        let l = sheaf_laplacian(&scalar_sheaf(3, vec![(0, 1)]));
        let d = degree_blocks(&l);
        assert_eq!(d.get(2, 2).unwrap(), &M::zeros(1, 1));
    }

    #[test]
    fn degree_blocks_of_rotation_sheaf_are_scaled_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let graph = bare_graph(4, vec![(0, 1), (0, 2), (0, 3), (1, 2)]);
        let d = 3;
        let maps = (0..graph.num_edges())
            .map(|_| {
                let mut mk = || {
                    RestrictionMap::SpecialOrthogonal(
                        crate::rotations::sample_uniform_so(d, &mut rng).unwrap(),
                    )
                };
                (mk(), mk())
            })
            .collect();
        let sheaf = CellularSheaf::new(graph.clone(), d, maps).unwrap();
        let deg = degree_blocks(&sheaf_laplacian(&sheaf));
        for u in 0..4 {
            let want = M::identity(d).scale(graph.degree(u) as f64);
            assert!(deg.get(u, u).unwrap().sub(&want).max_abs() < 1e-10);
        }
    }

    #[test]
    fn normalized_laplacian_single_edge() {
        let l = sheaf_laplacian(&scalar_sheaf(2, vec![(0, 1)]));
        let delta = normalized_laplacian(&l, &degree_blocks(&l), 0.0).unwrap();
        let want = M::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]);
        assert!(delta.to_dense().sub(&want).max_abs() < 1e-12);
    }

    #[test]
    fn normalized_laplacian_path_spectrum() {
        let l = sheaf_laplacian(&scalar_sheaf(3, vec![(0, 1), (1, 2)]));
        let delta = normalized_laplacian(&l, &degree_blocks(&l), 0.0).unwrap();
        let eig = linalg::sym_eig(&delta.to_dense()).unwrap();
        let want = [0.0, 1.0, 2.0];
        for (got, want) in eig.values.iter().zip(want) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn normalized_laplacian_matches_normalized_adjacency_identity() {
        let edges = vec![(0, 1), (0, 2), (1, 2), (2, 3), (1, 3)];
        let graph = bare_graph(4, edges.clone());
        let l = sheaf_laplacian(&CellularSheaf::identity(graph.clone(), 1).unwrap());
        let delta = normalized_laplacian(&l, &degree_blocks(&l), 0.0).unwrap().to_dense();
        let mut want = M::identity(4);
        for (u, v) in edges {
            let w = 1.0 / ((graph.degree(u) * graph.degree(v)) as f64).sqrt();
            want[(u, v)] -= w;
            want[(v, u)] -= w;
        }
        assert!(delta.sub(&want).max_abs() < 1e-10);
    }

    #[test]
    fn normalized_laplacian_isolated_node() {
        let l = sheaf_laplacian(&scalar_sheaf(3, vec![(0, 1)]));
        let deg = degree_blocks(&l);
        assert!(matches!(normalized_laplacian(&l, &deg, 0.0), Err(Error::Singular(_))));
        // With a positive floor the isolated block is regularized instead.
        let delta = normalized_laplacian(&l, &deg, 1e-8).unwrap();
        assert_eq!(delta.get(2, 2), None);
    }

    #[test]
    fn direct_sum_shapes_and_kinds() {
        let graph = bare_graph(2, vec![(0, 1)]);
        let s4 = CellularSheaf::identity(graph.clone(), 4).unwrap();
        let sum = direct_sum_sheaf(&[s4], 2).unwrap();
        assert_eq!(sum.stalk_dim(), 6);
        assert_eq!(sum.kind(), MapKind::SpecialOrthogonal);
        assert_eq!(sum.maps()[0].0.to_matrix(), M::identity(6));

        let s1 = CellularSheaf::identity(graph.clone(), 1).unwrap();
        let sum = direct_sum_sheaf(&[s1.clone(), s1], 0).unwrap();
        assert_eq!(sum.stalk_dim(), 2);
        assert_eq!(sum.maps()[0].1.to_matrix(), M::identity(2));
    }

    #[test]
    fn direct_sum_rejects_mismatched_graphs() {
        let a = CellularSheaf::identity(bare_graph(2, vec![(0, 1)]), 1).unwrap();
        let b = CellularSheaf::identity(bare_graph(3, vec![(0, 1)]), 1).unwrap();
        assert!(direct_sum_sheaf(&[a, b], 0).is_err());
    }

    #[test]
    fn direct_sum_laplacian_is_permutation_similar() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let graph = bare_graph(4, vec![(0, 1), (1, 2), (2, 3), (0, 3)]);
        let rand_sheaf = |d: usize, rng: &mut ChaCha20Rng| {
            let maps = (0..graph.num_edges())
                .map(|_| {
                    let mut mk = || {
                        RestrictionMap::general(M::from_fn(d, d, |_, _| {
                            rand::Rng::random_range(rng, -1.0..1.0)
                        }))
                        .unwrap()
                    };
                    (mk(), mk())
                })
                .collect();
            CellularSheaf::new(graph.clone(), d, maps).unwrap()
        };
        let (d1, d2) = (1, 2);
        let s1 = rand_sheaf(d1, &mut rng);
        let s2 = rand_sheaf(d2, &mut rng);
        let l1 = sheaf_laplacian(&s1).to_dense();
        let l2 = sheaf_laplacian(&s2).to_dense();
        let lsum = sheaf_laplacian(&direct_sum_sheaf(&[s1, s2], 0).unwrap()).to_dense();

        let n = 4;
        let dt = d1 + d2;
        // Index map from summed coordinates to block-diag(L1, L2) coordinates.
        let pi = |p: usize| {
            let (v, k) = (p / dt, p % dt);
            if k < d1 { v * d1 + k } else { n * d1 + v * d2 + (k - d1) }
        };
        let bd = |p: usize, q: usize| {
            let (a, b) = (pi(p), pi(q));
            let n1 = n * d1;
            if a < n1 && b < n1 {
                l1[(a, b)]
            } else if a >= n1 && b >= n1 {
                l2[(a - n1, b - n1)]
            } else {
                0.0
            }
        };
        for p in 0..n * dt {
            for q in 0..n * dt {
                assert!((lsum[(p, q)] - bd(p, q)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn orientation_flip_leaves_laplacian_unchanged() {
        let mut rng = ChaCha20Rng::seed_from_u64(43);
        let graph = bare_graph(3, vec![(0, 1), (1, 2), (0, 2)]);
        let d = 2;
        let maps = (0..graph.num_edges())
            .map(|_| {
                let mut mk = || {
                    RestrictionMap::general(M::from_fn(d, d, |_, _| {
                        rand::Rng::random_range(&mut rng, -1.0..1.0)
                    }))
                    .unwrap()
                };
                (mk(), mk())
            })
            .collect();
        let sheaf = CellularSheaf::new(graph, d, maps).unwrap();
        let mut delta = build_coboundary(&sheaf);
        let gram = delta.transpose().matmul(&delta);
        // Flip the sign convention of edge 1: negate its row block of δ.
        for r in d..2 * d {
            for c in 0..delta.cols() {
                delta[(r, c)] = -delta[(r, c)];
            }
        }
        let flipped = delta.transpose().matmul(&delta);
        assert!(gram.sub(&flipped).max_abs() < 1e-12);
    }
}
