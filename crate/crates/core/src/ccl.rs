//! 8-connected component labeling of a grid's positive support.
//!
//! Two raster passes over a union-find forest of provisional labels. The
//! first pass looks at the already-visited half of the 8-neighborhood
//! (NW, N, NE, W) and uses the classic decision tree: N, when present, is
//! adjacent to all three other scanned neighbors, so copying it needs no
//! merge; otherwise NE may have to be merged with NW or W. The second pass
//! resolves each provisional label to its root.
//!
//! Roots are always the smallest provisional label of their set, and
//! provisional labels are handed out in raster order, so renumbering roots
//! in increasing order yields final labels ordered by each component's
//! first (topmost, then leftmost) cell.

use crate::grid::Grid2D;

/// Array-backed disjoint-set forest whose roots are the minimum element of each set.
#[derive(Debug, Default)]
struct MinUnionFind {
    parent: Vec<u32>,
}

impl MinUnionFind {
    fn with_capacity(n: usize) -> Self {
        Self { parent: Vec::with_capacity(n) }
    }

    fn make_set(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        // path compression
        while self.parent[x as usize] != root {
            let next = self.parent[x as usize];
            self.parent[x as usize] = root;
            x = next;
        }
        root
    }

    fn union(&mut self, a: u32, b: u32) -> u32 {
        let ra = self.find(a);
        let rb = self.find(b);
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi as usize] = lo;
        lo
    }
}

/// Partition of a grid's support into 8-connected components.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentLabeling {
    side: usize,
    /// Row-major; 0 is background, components are `1..=count`.
    labels: Vec<u32>,
    /// `sizes[j]` is the cell count of component `j + 1`.
    sizes: Vec<usize>,
}

impl ComponentLabeling {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn label(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.side + col]
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Number of labeled (non-background) cells.
    pub fn support_size(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Binary mask of component `id` (1-based).
    pub fn mask(&self, id: u32) -> Grid2D {
        let values = self.labels.iter().map(|&l| if l == id { 1.0 } else { 0.0 }).collect();
        Grid2D::new(self.side, values).expect("mask of a valid labeling is a valid grid")
    }

    pub fn masks(&self) -> Vec<Grid2D> {
        (1..=self.count() as u32).map(|id| self.mask(id)).collect()
    }

    /// Cell indices of every component, in label order.
    pub fn cell_sets(&self) -> Vec<Vec<usize>> {
        let mut sets = vec![Vec::new(); self.count()];
        for (i, &l) in self.labels.iter().enumerate() {
            if l > 0 {
                sets[l as usize - 1].push(i);
            }
        }
        sets
    }

    /// Sum of `weights` over each component, in label order.
    pub fn component_masses(&self, weights: &Grid2D) -> Vec<f64> {
        assert_eq!(weights.side(), self.side, "weight grid side differs from labeling");
        let mut masses = vec![0.0; self.count()];
        for (&l, &w) in self.labels.iter().zip(weights.values()) {
            if l > 0 {
                masses[l as usize - 1] += w;
            }
        }
        masses
    }
}

/// Labels the cells of `b` with value strictly greater than `support_threshold`
/// into 8-connected components.
pub fn connected_components(b: &Grid2D, support_threshold: f64) -> ComponentLabeling {
    let k = b.side();
    let fg: Vec<bool> = b.values().iter().map(|&v| v > support_threshold).collect();
    let mut provisional = vec![u32::MAX; k * k];
    let mut uf = MinUnionFind::with_capacity(k * k / 2 + 1);

    for r in 0..k {
        for c in 0..k {
            let i = r * k + c;
            if !fg[i] {
                continue;
            }
            let at = |rr: usize, cc: usize| -> Option<u32> {
                let j = rr * k + cc;
                fg[j].then(|| provisional[j])
            };
            let north = if r > 0 { at(r - 1, c) } else { None };
            let label = if let Some(n) = north {
                n
            } else {
                let ne = if r > 0 && c + 1 < k { at(r - 1, c + 1) } else { None };
                let nw = if r > 0 && c > 0 { at(r - 1, c - 1) } else { None };
                let w = if c > 0 { at(r, c - 1) } else { None };
                match (ne, nw, w) {
                    (Some(a), Some(b), _) => uf.union(a, b),
                    (Some(a), None, Some(b)) => uf.union(a, b),
                    (Some(a), None, None) => a,
                    (None, Some(a), _) => a,
                    (None, None, Some(a)) => a,
                    (None, None, None) => uf.make_set(),
                }
            };
            provisional[i] = label;
        }
    }

    // Roots in increasing order get consecutive final labels.
    let n_prov = uf.parent.len();
    let mut final_of_root = vec![0u32; n_prov];
    let mut next = 0u32;
    for p in 0..n_prov as u32 {
        if uf.find(p) == p {
            next += 1;
            final_of_root[p as usize] = next;
        }
    }

    let mut labels = vec![0u32; k * k];
    let mut sizes = vec![0usize; next as usize];
    for i in 0..k * k {
        if fg[i] {
            let l = final_of_root[uf.find(provisional[i]) as usize];
            labels[i] = l;
            sizes[l as usize - 1] += 1;
        }
    }
    ComponentLabeling { side: k, labels, sizes }
}

/// Ids of the `n` components with the largest mass under `weights`, heaviest
/// first; equal masses are ordered by ascending id. Asking for more components
/// than exist returns all of them.
pub fn largest_components(l: &ComponentLabeling, n: usize, weights: &Grid2D) -> Vec<u32> {
    let masses = l.component_masses(weights);
    let mut ids: Vec<u32> = (1..=l.count() as u32).collect();
    ids.sort_by(|&a, &b| {
        masses[b as usize - 1]
            .total_cmp(&masses[a as usize - 1])
            .then(a.cmp(&b))
    });
    ids.truncate(n.max(1));
    ids
}
