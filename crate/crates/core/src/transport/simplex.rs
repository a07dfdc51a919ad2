//! Network simplex on the complete bipartite transportation graph.
//!
//! The basis is a spanning tree over the `m` supply (row) and `n` demand
//! (column) nodes. Only tree arcs carry flow, so memory is `O(m + n)` and
//! costs are queried lazily through [`TransportCost`]. Entering arcs are
//! chosen by block pricing; after a long run of degenerate pivots the solver
//! falls back to Bland's rule until the objective moves again, which rules
//! out cycling.
//!
//! Small problems start from a north-west corner along the cost's ordering
//! hint. Large ones first solve a problem coarsened along that ordering,
//! start from the flow it suggests, and price a shortlist of arcs until a
//! full scan finds no violation.

use crate::error::{Error, Result};
use crate::scalar::LpValue;

use super::coupling::{CouplingMatrix, TransportCost};

const NONE: usize = usize::MAX;
/// Problems with at least this many arcs start from a shortlist.
const SHORTLIST_MIN_ARCS: usize = 1 << 16;
const VIOLATIONS_PER_ROW: usize = 8;
const SHORTLIST_PER_ROW: usize = 16;
/// Members per group when coarsening along the ordering hint.
const COARSE_GROUP: usize = 4;

/// An optimal transference plan with its dual certificate.
#[derive(Debug, Clone)]
pub struct OptimalCoupling<V> {
    pub coupling: CouplingMatrix<V>,
    pub objective: V,
    /// `u_i`, with `c_ij ≥ u_i + v_j` everywhere and equality on the support.
    pub row_potentials: Vec<V>,
    pub col_potentials: Vec<V>,
    pub pivots: usize,
}

impl<V: LpValue> OptimalCoupling<V> {
    /// `Σ_i a_i u_i + Σ_j b_j v_j`.
    pub fn dual_objective(&self) -> V {
        let rows = self
            .coupling
            .row_marginal()
            .iter()
            .zip(&self.row_potentials);
        let cols = self
            .coupling
            .col_marginal()
            .iter()
            .zip(&self.col_potentials);
        rows.chain(cols)
            .fold(V::zero(), |acc, (m, p)| acc + m.clone() * p.clone())
    }
}

/// Solves `min Σ t_ij c_ij` subject to `Σ_j t_ij = rows_i`, `Σ_i t_ij = cols_j`,
/// `t_ij ≥ 0`.
///
/// Zero-mass rows or columns are kept in the problem so indices stay aligned
/// with the caller's ensemble.
pub fn solve_optimal_coupling<V, C>(cost: &C, rows: &[V], cols: &[V]) -> Result<OptimalCoupling<V>>
where
    V: LpValue,
    C: TransportCost<V> + ?Sized,
{
    let (m, n) = (rows.len(), cols.len());
    if m == 0 || n == 0 {
        return Err(Error::InvalidMarginal("marginals must be nonempty".into()));
    }
    if cost.rows() != m || cost.cols() != n {
        return Err(Error::DimensionMismatch {
            expected: m * n,
            found: cost.rows() * cost.cols(),
        });
    }
    if rows.iter().chain(cols).any(|v| *v < V::zero()) {
        return Err(Error::InvalidMarginal(
            "marginals must be nonnegative".into(),
        ));
    }
    let row_total = rows.iter().fold(V::zero(), |a, b| a + b.clone());
    let col_total = cols.iter().fold(V::zero(), |a, b| a + b.clone());
    if (row_total.clone() - col_total.clone()).abs() > V::balance_tolerance(&row_total) {
        return Err(Error::MarginalMismatch {
            rows: row_total.approx_f64(),
            cols: col_total.approx_f64(),
        });
    }

    let (mut tree, shortlist) = if m * n >= SHORTLIST_MIN_ARCS {
        let planned = coarse_guided_arcs(cost, rows, cols)?;
        let mut list = shortlist(cost, SHORTLIST_PER_ROW);
        let cells = greedy_cells(cost, rows, cols, &planned, &list);
        list.extend(planned);
        list.sort_unstable();
        list.dedup();
        (Tree::from_cells(cost, cells), Some(list))
    } else {
        (
            Tree::from_cells(cost, north_west_corner(cost, rows, cols)),
            None,
        )
    };
    let pivots = tree.optimize(cost, shortlist)?;
    tree.recompute_flows(rows, cols);
    tree.recompute_potentials(cost);

    let mut entries = Vec::with_capacity(m + n - 1);
    let mut objective = V::zero();
    for k in 0..m + n {
        if tree.parent[k] == NONE {
            continue;
        }
        let (i, j) = tree.arc(k);
        let f = tree.flow[k].clone();
        if f > V::zero() {
            objective = objective + f.clone() * cost.cost(i, j);
            entries.push((i, j, f));
        }
    }
    let coupling = CouplingMatrix::from_triplets(m, n, entries, rows.to_vec(), cols.to_vec())?;
    Ok(OptimalCoupling {
        coupling,
        objective,
        row_potentials: tree.pot[..m].to_vec(),
        col_potentials: tree.pot[m..].to_vec(),
        pivots,
    })
}

/// Arcs with flows forming a spanning tree, plus the node to root it at.
struct Cells<V> {
    m: usize,
    n: usize,
    root: usize,
    cells: Vec<(usize, usize, V)>,
}

/// Staircase of `m + n − 1` cells from the top-left to the bottom-right
/// corner along the cost's preferred ordering.
fn north_west_corner<V: LpValue, C: TransportCost<V> + ?Sized>(
    cost: &C,
    rows: &[V],
    cols: &[V],
) -> Cells<V> {
    let (m, n) = (rows.len(), cols.len());
    let (row_order, col_order) = cost
        .ordering_hint()
        .filter(|(r, c)| r.len() == m && c.len() == n)
        .unwrap_or_else(|| ((0..m).collect(), (0..n).collect()));

    // Staircase of m + n - 1 cells from the top-left to the bottom-right
    // corner; consecutive cells share a row or a column, so they form a
    // spanning tree. On ties the walk moves right.
    let mut supply: Vec<V> = row_order.iter().map(|&i| rows[i].clone()).collect();
    let mut demand: Vec<V> = col_order.iter().map(|&j| cols[j].clone()).collect();
    let mut cells: Vec<(usize, usize, V)> = Vec::with_capacity(m + n - 1);
    let (mut a, mut b) = (0usize, 0usize);
    loop {
        let x = if supply[a] < demand[b] {
            supply[a].clone()
        } else {
            demand[b].clone()
        };
        let x = if x < V::zero() { V::zero() } else { x };
        supply[a] = supply[a].clone() - x.clone();
        demand[b] = demand[b].clone() - x.clone();
        cells.push((row_order[a], col_order[b], x));
        if a == m - 1 && b == n - 1 {
            break;
        }
        let move_down = if a == m - 1 {
            false
        } else if b == n - 1 {
            true
        } else {
            supply[a] < demand[b]
        };
        if move_down {
            a += 1;
        } else {
            b += 1;
        }
    }
    Cells {
        m,
        n,
        root: row_order[0],
        cells,
    }
}

/// Matrix-minimum start: candidate arcs in increasing cost order each take
/// the largest feasible flow and retire one endpoint. Mass the candidates
/// cannot place is routed by a staircase over the remaining nodes, and
/// zero-flow arcs join the resulting forest into a spanning tree.
fn greedy_cells<V: LpValue, C: TransportCost<V> + ?Sized>(
    cost: &C,
    rows: &[V],
    cols: &[V],
    planned: &[usize],
    candidates: &[usize],
) -> Cells<V> {
    let (m, n) = (rows.len(), cols.len());
    let mut supply = rows.to_vec();
    let mut demand = cols.to_vec();
    let mut alive = vec![true; m + n];
    let mut cells: Vec<(usize, usize, V)> = Vec::with_capacity(m + n - 1);

    let mut order: Vec<(V, usize)> = candidates
        .iter()
        .map(|&a| (cost.cost(a / n, a % n), a))
        .collect();
    order.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap_or(std::cmp::Ordering::Equal));
    // Retiring exactly one endpoint per arc keeps the cells acyclic.
    let place = |i: usize,
                 j: usize,
                 supply: &mut [V],
                 demand: &mut [V],
                 alive: &mut [bool],
                 cells: &mut Vec<(usize, usize, V)>,
                 last: bool| {
        let x = if supply[i] < demand[j] {
            supply[i].clone()
        } else {
            demand[j].clone()
        };
        let x = if x < V::zero() { V::zero() } else { x };
        supply[i] = supply[i].clone() - x.clone();
        demand[j] = demand[j].clone() - x.clone();
        cells.push((i, j, x));
        if last {
            return;
        }
        if supply[i] <= demand[j] {
            alive[i] = false;
        } else {
            alive[m + j] = false;
        }
    };
    for a in planned.iter().copied().chain(order.iter().map(|&(_, a)| a)) {
        let (i, j) = (a / n, a % n);
        if alive[i] && alive[m + j] && supply[i] > V::zero() && demand[j] > V::zero() {
            place(
                i,
                j,
                &mut supply,
                &mut demand,
                &mut alive,
                &mut cells,
                false,
            );
        }
    }

    // Staircase over nodes that still carry mass.
    let (row_order, col_order) = cost
        .ordering_hint()
        .filter(|(r, c)| r.len() == m && c.len() == n)
        .unwrap_or_else(|| ((0..m).collect(), (0..n).collect()));
    let rest_rows: Vec<usize> = row_order
        .into_iter()
        .filter(|&i| alive[i] && supply[i] > V::zero())
        .collect();
    let rest_cols: Vec<usize> = col_order
        .into_iter()
        .filter(|&j| alive[m + j] && demand[j] > V::zero())
        .collect();
    if !rest_rows.is_empty() && !rest_cols.is_empty() {
        let (mut a, mut b) = (0usize, 0usize);
        loop {
            let (i, j) = (rest_rows[a], rest_cols[b]);
            let last = a + 1 == rest_rows.len() && b + 1 == rest_cols.len();
            place(i, j, &mut supply, &mut demand, &mut alive, &mut cells, last);
            if last {
                break;
            }
            let move_down = if a + 1 == rest_rows.len() {
                false
            } else if b + 1 == rest_cols.len() {
                true
            } else {
                !alive[i]
            };
            if move_down {
                alive[i] = false;
                a += 1;
            } else {
                alive[m + j] = false;
                b += 1;
            }
        }
    }

    // Join the forest's components with zero-flow arcs.
    let mut uf = UnionFind::new(m + n);
    for &(i, j, _) in &cells {
        uf.union(i, m + j);
    }
    let hub_row = 0usize;
    let hub_col = (0..n)
        .find(|&j| uf.find(m + j) == uf.find(hub_row))
        .unwrap_or_else(|| {
            cells.push((hub_row, 0, V::zero()));
            uf.union(hub_row, m);
            0
        });
    for k in 0..m + n {
        if uf.find(k) == uf.find(hub_row) {
            continue;
        }
        let (i, j) = if k < m {
            (k, hub_col)
        } else {
            (hub_row, k - m)
        };
        cells.push((i, j, V::zero()));
        uf.union(i, m + j);
    }
    debug_assert_eq!(cells.len(), m + n - 1);
    Cells {
        m,
        n,
        root: hub_row,
        cells,
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut k: usize) -> usize {
        while self.parent[k] != k {
            self.parent[k] = self.parent[self.parent[k]];
            k = self.parent[k];
        }
        k
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }
}

/// The problem with rows and columns merged into consecutive groups along
/// the ordering hint, each group represented by its middle member.
struct CoarseCost<'a, V> {
    fine: &'a dyn TransportCost<V>,
    row_rep: Vec<usize>,
    col_rep: Vec<usize>,
}

/// Sized view of a cost, so that any cost can be used as a trait object.
struct ByRef<'a, C: ?Sized>(&'a C);

impl<V, C: TransportCost<V> + ?Sized> TransportCost<V> for ByRef<'_, C> {
    fn rows(&self) -> usize {
        self.0.rows()
    }

    fn cols(&self) -> usize {
        self.0.cols()
    }

    fn cost(&self, i: usize, j: usize) -> V {
        self.0.cost(i, j)
    }
}

impl<V> TransportCost<V> for CoarseCost<'_, V> {
    fn rows(&self) -> usize {
        self.row_rep.len()
    }

    fn cols(&self) -> usize {
        self.col_rep.len()
    }

    fn cost(&self, i: usize, j: usize) -> V {
        self.fine.cost(self.row_rep[i], self.col_rep[j])
    }

    fn ordering_hint(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        Some((
            (0..self.row_rep.len()).collect(),
            (0..self.col_rep.len()).collect(),
        ))
    }
}

/// Arcs between members of groups joined by the optimal coarse coupling.
/// Empty without an ordering hint.
fn coarse_guided_arcs<V: LpValue, C: TransportCost<V> + ?Sized>(
    cost: &C,
    rows: &[V],
    cols: &[V],
) -> Result<Vec<usize>> {
    let (m, n) = (rows.len(), cols.len());
    let Some((row_order, col_order)) = cost
        .ordering_hint()
        .filter(|(r, c)| r.len() == m && c.len() == n)
    else {
        return Ok(Vec::new());
    };
    let row_groups: Vec<&[usize]> = row_order.chunks(COARSE_GROUP).collect();
    let col_groups: Vec<&[usize]> = col_order.chunks(COARSE_GROUP).collect();
    let mass = |g: &[usize], w: &[V]| g.iter().fold(V::zero(), |a, &k| a + w[k].clone());
    let coarse_rows: Vec<V> = row_groups.iter().map(|g| mass(g, rows)).collect();
    let coarse_cols: Vec<V> = col_groups.iter().map(|g| mass(g, cols)).collect();
    let fine = ByRef(cost);
    let coarse = CoarseCost {
        fine: &fine,
        row_rep: row_groups.iter().map(|g| g[g.len() / 2]).collect(),
        col_rep: col_groups.iter().map(|g| g[g.len() / 2]).collect(),
    };
    let sol = solve_optimal_coupling(&coarse, &coarse_rows, &coarse_cols)?;

    // Split each group's mass over its coarse arcs with a staircase, so that
    // every coarse arc knows which members feed it.
    let (mr, nc) = (row_groups.len(), col_groups.len());
    let mut by_row: Vec<Vec<(usize, V)>> = vec![Vec::new(); mr];
    let mut by_col: Vec<Vec<(usize, V)>> = vec![Vec::new(); nc];
    let mut arc_ids: Vec<(usize, usize)> = Vec::new();
    for (gi, gj, mu) in sol.coupling.entries() {
        let id = arc_ids.len();
        arc_ids.push((gi, gj));
        by_row[gi].push((id, mu.clone()));
        by_col[gj].push((id, mu.clone()));
    }
    let mut row_pieces: Vec<Vec<(usize, V)>> = vec![Vec::new(); arc_ids.len()];
    let mut col_pieces: Vec<Vec<(usize, V)>> = vec![Vec::new(); arc_ids.len()];
    for (g, arcs) in by_row.iter_mut().enumerate() {
        arcs.sort_by_key(|&(id, _)| arc_ids[id].1);
        split(row_groups[g], rows, arcs, &mut row_pieces);
    }
    for (g, arcs) in by_col.iter_mut().enumerate() {
        arcs.sort_by_key(|&(id, _)| arc_ids[id].0);
        split(col_groups[g], cols, arcs, &mut col_pieces);
    }
    let mut arcs = Vec::new();
    for id in 0..arc_ids.len() {
        let (rp, cp) = (&row_pieces[id], &col_pieces[id]);
        if rp.is_empty() || cp.is_empty() {
            continue;
        }
        let (mut a, mut b) = (0usize, 0usize);
        let mut ra = rp[0].1.clone();
        let mut cb = cp[0].1.clone();
        loop {
            arcs.push(rp[a].0 * n + cp[b].0);
            if a + 1 == rp.len() && b + 1 == cp.len() {
                break;
            }
            if b + 1 == cp.len() || (a + 1 < rp.len() && ra < cb) {
                cb = cb - ra.clone();
                a += 1;
                ra = rp[a].1.clone();
            } else {
                ra = ra - cb.clone();
                b += 1;
                cb = cp[b].1.clone();
            }
        }
    }
    Ok(arcs)
}

/// Staircase between the members of a group and the coarse arcs leaving it;
/// appends `(member, amount)` pieces to each arc.
fn split<V: LpValue>(
    members: &[usize],
    mass: &[V],
    arcs: &[(usize, V)],
    pieces: &mut [Vec<(usize, V)>],
) {
    if arcs.is_empty() {
        return;
    }
    let (mut a, mut b) = (0usize, 0usize);
    let mut left = mass[members[0]].clone();
    let mut need = arcs[0].1.clone();
    loop {
        let x = if left < need {
            left.clone()
        } else {
            need.clone()
        };
        if x > V::zero() {
            pieces[arcs[b].0].push((members[a], x.clone()));
        }
        left = left - x.clone();
        need = need - x;
        let rows_done = a + 1 == members.len();
        let arcs_done = b + 1 == arcs.len();
        if rows_done && arcs_done {
            break;
        }
        if arcs_done || (!rows_done && left <= need) {
            a += 1;
            left = mass[members[a]].clone();
        } else {
            b += 1;
            need = arcs[b].1.clone();
        }
    }
}

/// The `k` cheapest arcs of every row.
fn shortlist<V: LpValue, C: TransportCost<V> + ?Sized>(cost: &C, k: usize) -> Vec<usize> {
    let (m, n) = (cost.rows(), cost.cols());
    let k = k.min(n);
    let mut out = Vec::with_capacity(m * k);
    let mut row: Vec<(V, usize)> = Vec::with_capacity(n);
    for i in 0..m {
        row.clear();
        row.extend((0..n).map(|j| (cost.cost(i, j), j)));
        if k < n {
            row.select_nth_unstable_by(k, |a, b| {
                a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal)
            });
        }
        out.extend(row[..k].iter().map(|&(_, j)| i * n + j));
    }
    out
}

struct Tree<V> {
    m: usize,
    n: usize,
    root: usize,
    parent: Vec<usize>,
    /// Flow on the arc joining a node to its parent.
    flow: Vec<V>,
    /// Number of nodes in the subtree below and including each node.
    size: Vec<usize>,
    /// Children as intrusive doubly linked sibling lists.
    first_child: Vec<usize>,
    next_sib: Vec<usize>,
    prev_sib: Vec<usize>,
    pot: Vec<V>,
    tol: V,
}

impl<V: LpValue> Tree<V> {
    fn is_row(&self, k: usize) -> bool {
        k < self.m
    }

    /// `(row, col)` of the arc joining `k` to its parent.
    fn arc(&self, k: usize) -> (usize, usize) {
        let p = self.parent[k];
        if self.is_row(k) {
            (k, p - self.m)
        } else {
            (p, k - self.m)
        }
    }

    /// Builds the tree spanned by `cells`, which must be `m + n − 1` arcs
    /// forming a spanning tree of the bipartite graph.
    fn from_cells<C: TransportCost<V> + ?Sized>(cost: &C, cells: Cells<V>) -> Self {
        let Cells { m, n, root, cells } = cells;
        let total = m + n;
        let mut adjacency: Vec<Vec<(usize, V)>> = vec![Vec::new(); total];
        for (i, j, x) in cells {
            adjacency[i].push((m + j, x.clone()));
            adjacency[m + j].push((i, x));
        }
        let scale = (0..m.min(8))
            .flat_map(|i| (0..n.min(8)).map(move |j| (i, j)))
            .map(|(i, j)| cost.cost(i, j).abs())
            .fold(V::zero(), |a, b| if b > a { b } else { a });
        let mut tree = Tree {
            m,
            n,
            root,
            parent: vec![NONE; total],
            flow: vec![V::zero(); total],
            size: vec![1; total],
            first_child: vec![NONE; total],
            next_sib: vec![NONE; total],
            prev_sib: vec![NONE; total],
            pot: vec![V::zero(); total],
            tol: V::pivot_tolerance(&scale),
        };
        let mut stack = vec![tree.root];
        let mut seen = vec![false; total];
        seen[tree.root] = true;
        while let Some(k) = stack.pop() {
            for (nb, x) in std::mem::take(&mut adjacency[k]) {
                if seen[nb] {
                    continue;
                }
                seen[nb] = true;
                tree.flow[nb] = x;
                tree.attach(nb, k);
                stack.push(nb);
            }
        }
        for k in tree.preorder().into_iter().rev() {
            let p = tree.parent[k];
            if p != NONE {
                tree.size[p] += tree.size[k];
            }
        }
        tree.recompute_potentials(cost);
        tree
    }

    /// Makes `c` a child of `p`.
    fn attach(&mut self, c: usize, p: usize) {
        self.parent[c] = p;
        let head = self.first_child[p];
        self.next_sib[c] = head;
        self.prev_sib[c] = NONE;
        if head != NONE {
            self.prev_sib[head] = c;
        }
        self.first_child[p] = c;
    }

    /// Removes `c` from its parent's child list.
    fn detach(&mut self, c: usize) {
        let (prev, next) = (self.prev_sib[c], self.next_sib[c]);
        if prev != NONE {
            self.next_sib[prev] = next;
        } else {
            self.first_child[self.parent[c]] = next;
        }
        if next != NONE {
            self.prev_sib[next] = prev;
        }
        self.parent[c] = NONE;
    }

    /// Successor of `k` in a preorder walk of the subtree at `start` that
    /// leaves out the subtree at `skip`.
    fn next_preorder(&self, k: usize, start: usize, skip: usize) -> Option<usize> {
        let mut c = self.first_child[k];
        if c != NONE && c == skip {
            c = self.next_sib[c];
        }
        if c != NONE {
            return Some(c);
        }
        let mut k = k;
        while k != start {
            let mut s = self.next_sib[k];
            if s != NONE && s == skip {
                s = self.next_sib[s];
            }
            if s != NONE {
                return Some(s);
            }
            k = self.parent[k];
        }
        None
    }

    fn preorder(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.m + self.n);
        let mut k = Some(self.root);
        while let Some(x) = k {
            order.push(x);
            k = self.next_preorder(x, self.root, NONE);
        }
        order
    }

    fn recompute_potentials<C: TransportCost<V> + ?Sized>(&mut self, cost: &C) {
        for k in self.preorder() {
            let p = self.parent[k];
            if p == NONE {
                self.pot[k] = V::zero();
            } else {
                let (i, j) = self.arc(k);
                self.pot[k] = cost.cost(i, j) - self.pot[p].clone();
            }
        }
    }

    /// Tree flows from subtree mass balances; removes accumulated round-off.
    fn recompute_flows(&mut self, rows: &[V], cols: &[V]) {
        let total = self.m + self.n;
        let order: Vec<usize> = self.preorder().into_iter().rev().collect();
        let mut net: Vec<V> = (0..total)
            .map(|k| {
                if self.is_row(k) {
                    rows[k].clone()
                } else {
                    -cols[k - self.m].clone()
                }
            })
            .collect();
        for k in order {
            let p = self.parent[k];
            if p == NONE {
                continue;
            }
            let f = if self.is_row(k) {
                net[k].clone()
            } else {
                -net[k].clone()
            };
            self.flow[k] = if f < V::zero() { V::zero() } else { f };
            net[p] = net[p].clone() + net[k].clone();
        }
    }

    fn reduced_cost<C: TransportCost<V> + ?Sized>(&self, cost: &C, i: usize, j: usize) -> V {
        cost.cost(i, j) - self.pot[i].clone() - self.pot[self.m + j].clone()
    }

    fn optimize<C: TransportCost<V> + ?Sized>(
        &mut self,
        cost: &C,
        shortlist: Option<Vec<usize>>,
    ) -> Result<usize> {
        let arcs = self.m * self.n;
        let bland_after = (self.m + self.n).max(100);
        let max_pivots = 50 * arcs + 10_000;
        let neg_tol = -self.tol.clone();

        // Large problems price a shortlist of cheap arcs per row first and
        // only fall back to a full scan once the shortlist is optimal.
        let mut candidates: Vec<usize> = shortlist.unwrap_or_else(|| (0..arcs).collect());
        let full_list = candidates.len() == arcs;

        let mut next = 0usize;
        let mut pivots = 0usize;
        let mut degenerate_run = 0usize;
        loop {
            let bland = degenerate_run > bland_after;
            let entering = if bland {
                (0..arcs).find(|&a| self.reduced_cost(cost, a / self.n, a % self.n) < neg_tol)
            } else {
                match self.block_search(cost, &candidates, &mut next, &neg_tol) {
                    Some(a) => Some(a),
                    None if full_list => None,
                    None => {
                        let extra = self.violations(cost, &neg_tol, VIOLATIONS_PER_ROW);
                        let first = extra.first().copied();
                        next = candidates.len();
                        candidates.extend(extra);
                        first
                    }
                }
            };
            let Some(a) = entering else {
                return Ok(pivots);
            };
            if pivots >= max_pivots {
                return Err(Error::NonConvergence {
                    method: "network simplex",
                    iterations: pivots,
                    error: f64::NAN,
                });
            }
            let degenerate = self.pivot(cost, a / self.n, a % self.n, bland);
            pivots += 1;
            if degenerate {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
        }
    }

    /// Up to `k` most negative reduced-cost arcs of every row.
    fn violations<C: TransportCost<V> + ?Sized>(
        &self,
        cost: &C,
        neg_tol: &V,
        k: usize,
    ) -> Vec<usize> {
        let mut out = Vec::new();
        let mut row: Vec<(V, usize)> = Vec::new();
        for i in 0..self.m {
            row.clear();
            for j in 0..self.n {
                let r = self.reduced_cost(cost, i, j);
                if r < *neg_tol {
                    row.push((r, j));
                }
            }
            if row.len() > k {
                row.select_nth_unstable_by(k, |a, b| {
                    a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal)
                });
                row.truncate(k);
            }
            out.extend(row.iter().map(|&(_, j)| i * self.n + j));
        }
        out
    }

    fn block_search<C: TransportCost<V> + ?Sized>(
        &self,
        cost: &C,
        list: &[usize],
        next: &mut usize,
        neg_tol: &V,
    ) -> Option<usize> {
        let len = list.len();
        let block = ((len as f64).sqrt().ceil() as usize).max(10).min(len);
        let mut best: Option<(usize, V)> = None;
        let mut scanned = 0usize;
        let mut pos = *next % len.max(1);
        while scanned < len {
            let a = list[pos];
            let r = self.reduced_cost(cost, a / self.n, a % self.n);
            if r < *neg_tol && best.as_ref().is_none_or(|(_, b)| r < *b) {
                best = Some((a, r));
            }
            scanned += 1;
            pos += 1;
            if pos == len {
                pos = 0;
            }
            if scanned.is_multiple_of(block) && best.is_some() {
                break;
            }
        }
        *next = pos;
        best.map(|(a, _)| a)
    }

    /// Brings arc `(i, j)` into the basis. Returns true for a degenerate pivot.
    fn pivot<C: TransportCost<V> + ?Sized>(
        &mut self,
        cost: &C,
        i: usize,
        j: usize,
        bland: bool,
    ) -> bool {
        let (u, v) = (i, self.m + j);
        let entering_reduced = self.reduced_cost(cost, i, j);

        // Paths from both endpoints to their common ancestor. The cycle is
        // oriented i -> j -> (up to apex) -> (down to i).
        let (mut a, mut b) = (u, v);
        let mut path_u = Vec::new();
        let mut path_v = Vec::new();
        while a != b {
            // A proper ancestor always has the larger subtree.
            if self.size[a] < self.size[b] {
                path_u.push(a);
                a = self.parent[a];
            } else {
                path_v.push(b);
                b = self.parent[b];
            }
        }
        let decreasing_u = |t: &Self, k: usize| t.is_row(k);
        let decreasing_v = |t: &Self, k: usize| !t.is_row(k);

        // Traverse from the apex in cycle order: down the u-side, then up the
        // v-side. Ties keep the last blocking arc, or the lowest arc index
        // under Bland's rule.
        let mut leaving: Option<(usize, bool)> = None;
        let mut theta: Option<V> = None;
        let consider = |t: &Self,
                        k: usize,
                        on_u: bool,
                        leaving: &mut Option<(usize, bool)>,
                        theta: &mut Option<V>| {
            let f = t.flow[k].clone();
            let better = match theta.as_ref() {
                None => true,
                Some(th) if f < *th => true,
                Some(th) if f == *th => {
                    if bland {
                        let (ci, cj) = t.arc(k);
                        let (li, lj) = t.arc(leaving.expect("set with theta").0);
                        ci * t.n + cj < li * t.n + lj
                    } else {
                        true
                    }
                }
                _ => false,
            };
            if better {
                *theta = Some(f);
                *leaving = Some((k, on_u));
            }
        };
        for &k in path_u.iter().rev() {
            if decreasing_u(self, k) {
                consider(self, k, true, &mut leaving, &mut theta);
            }
        }
        for &k in path_v.iter() {
            if decreasing_v(self, k) {
                consider(self, k, false, &mut leaving, &mut theta);
            }
        }
        let (out, out_on_u) = leaving.expect("cycle has a decreasing arc");
        let theta = theta.expect("cycle has a decreasing arc");
        let degenerate = theta <= self.tol;

        if !theta.is_zero() {
            for &k in &path_u {
                self.shift_flow(k, &theta, decreasing_u(self, k));
            }
            for &k in &path_v {
                self.shift_flow(k, &theta, decreasing_v(self, k));
            }
        }

        // Re-hang the subtree cut off by removing `out`.
        let (q, other) = if out_on_u { (u, v) } else { (v, u) };
        let path = if out_on_u { &path_u } else { &path_v };
        let len = path
            .iter()
            .position(|&k| k == out)
            .expect("leaving node on path")
            + 1;
        let chain: Vec<usize> = path[..len].to_vec();
        debug_assert_eq!(chain[0], q);

        let moved = self.size[out];
        let mut k = self.parent[out];
        self.detach(out);
        while k != NONE {
            self.size[k] -= moved;
            k = self.parent[k];
        }
        let saved: Vec<V> = chain.iter().map(|&k| self.flow[k].clone()).collect();
        let old_size: Vec<usize> = chain.iter().map(|&k| self.size[k]).collect();
        for t in (1..chain.len()).rev() {
            let (lo, hi) = (chain[t - 1], chain[t]);
            self.detach(lo);
            self.attach(hi, lo);
            self.flow[hi] = saved[t - 1].clone();
            self.size[hi] = moved - old_size[t - 1];
        }
        self.size[q] = moved;
        self.flow[q] = theta;
        self.attach(q, other);
        let mut k = other;
        while k != NONE {
            self.size[k] += moved;
            k = self.parent[k];
        }

        // Restore u_i + v_j = c_ij on the entering arc by shifting the moved
        // subtree, or equivalently the rest of the tree in the opposite
        // direction, whichever is smaller.
        let q_is_row = self.is_row(q);
        let total = self.m + self.n;
        let (start, skip, plus_rows) = if 2 * moved <= total {
            (q, NONE, q_is_row)
        } else {
            (self.root, q, !q_is_row)
        };
        let mut k = Some(start);
        while let Some(x) = k {
            if self.is_row(x) == plus_rows {
                self.pot[x] = self.pot[x].clone() + entering_reduced.clone();
            } else {
                self.pot[x] = self.pot[x].clone() - entering_reduced.clone();
            }
            k = self.next_preorder(x, start, skip);
        }
        degenerate
    }

    fn shift_flow(&mut self, k: usize, theta: &V, decrease: bool) {
        let f = if decrease {
            self.flow[k].clone() - theta.clone()
        } else {
            self.flow[k].clone() + theta.clone()
        };
        self.flow[k] = if f < V::zero() { V::zero() } else { f };
    }
}
