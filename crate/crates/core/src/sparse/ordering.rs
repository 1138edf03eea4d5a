use std::cmp::Reverse;
use std::collections::BinaryHeap;

/// Fill-reducing symmetric ordering by exact minimum degree on the
/// elimination graph. Nodes whose degree exceeds `max(16, 10·√n)` (fixed
/// effects, temporal main effects) are postponed to the end in their original
/// order. Returns `perm` with `perm[new] = old`. Ties break on the smaller
/// index, so the result is deterministic.
pub fn minimum_degree_order(n: usize, colptr: &[usize], rowidx: &[usize]) -> Vec<usize> {
    let mut adj: Vec<Vec<usize>> = (0..n)
        .map(|j| {
            let mut v: Vec<usize> = rowidx[colptr[j]..colptr[j + 1]].iter().copied().filter(|&i| i != j).collect();
            v.sort_unstable();
            v.dedup();
            v
        })
        .collect();
    let threshold = 16usize.max((10.0 * (n as f64).sqrt()) as usize);
    let dense: Vec<bool> = adj.iter().map(|a| a.len() > threshold).collect();
    for list in adj.iter_mut() {
        list.retain(|&i| !dense[i]);
    }
    let mut eliminated = dense.clone();
    let mut heap: BinaryHeap<(Reverse<usize>, Reverse<usize>)> =
        (0..n).filter(|&v| !dense[v]).map(|v| (Reverse(adj[v].len()), Reverse(v))).collect();
    let mut order = Vec::with_capacity(n);
    let mut merged = Vec::new();
    while let Some((Reverse(deg), Reverse(v))) = heap.pop() {
        if eliminated[v] || adj[v].len() != deg {
            continue;
        }
        eliminated[v] = true;
        order.push(v);
        let nbrs = std::mem::take(&mut adj[v]);
        for &u in &nbrs {
            merged.clear();
            let (a, b) = (&adj[u], &nbrs);
            let (mut i, mut j) = (0, 0);
            while i < a.len() || j < b.len() {
                let next = match (a.get(i), b.get(j)) {
                    (Some(&x), Some(&y)) if x == y => {
                        i += 1;
                        j += 1;
                        x
                    }
                    (Some(&x), Some(&y)) if x < y => {
                        i += 1;
                        x
                    }
                    (Some(_), Some(&y)) => {
                        j += 1;
                        y
                    }
                    (Some(&x), None) => {
                        i += 1;
                        x
                    }
                    (None, Some(&y)) => {
                        j += 1;
                        y
                    }
                    (None, None) => unreachable!(),
                };
                if next != u && next != v {
                    merged.push(next);
                }
            }
            std::mem::swap(&mut adj[u], &mut merged);
            heap.push((Reverse(adj[u].len()), Reverse(u)));
        }
    }
    order.extend((0..n).filter(|&v| dense[v]));
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arrow_matrix_puts_hub_last() {
        // Star graph: node 0 linked to everyone.
        let n = 40;
        let mut colptr = vec![0];
        let mut rowidx = Vec::new();
        for j in 0..n {
            let mut col: Vec<usize> = if j == 0 { (0..n).collect() } else { vec![0, j] };
            col.dedup();
            rowidx.extend(col);
            colptr.push(rowidx.len());
        }
        let perm = minimum_degree_order(n, &colptr, &rowidx);
        // Once all other leaves are gone the hub ties with the last leaf.
        let hub_at = perm.iter().position(|&v| v == 0).unwrap();
        assert!(hub_at >= n - 2, "hub eliminated at {hub_at}");
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }
}
