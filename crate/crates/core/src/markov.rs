//! Long-run state occupancy of finite Markov chains.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Sparse row-stochastic matrix: `rows[i]` lists `(j, P(i → j))`.
pub type SparseChain = Vec<Vec<(usize, f64)>>;

/// Cesàro-limit distribution `lim (1/t) Σ_s δ_start Pˢ`.
///
/// Handles chains with several closed classes: each class's stationary law is
/// weighted by the probability of being absorbed into it from `start`.
pub fn long_run_distribution(chain: &SparseChain, start: usize) -> Result<Vec<f64>> {
    let n = chain.len();
    let reachable = reachable_from(chain, start);
    let comps = strongly_connected(chain, &reachable);

    let mut comp_of = vec![usize::MAX; n];
    for (k, comp) in comps.iter().enumerate() {
        for &i in comp {
            comp_of[i] = k;
        }
    }
    let closed: Vec<usize> = (0..comps.len())
        .filter(|&k| {
            comps[k].iter().all(|&i| {
                chain[i]
                    .iter()
                    .all(|&(j, p)| p <= 0.0 || comp_of[j] == k)
            })
        })
        .collect();

    let mut dist = vec![0.0; n];
    if closed.len() == 1 {
        let class = &comps[closed[0]];
        for (i, p) in class.iter().zip(stationary_on(chain, class)?) {
            dist[*i] = p;
        }
        return Ok(dist);
    }

    let weights = absorption_weights(chain, &reachable, &comp_of, &closed, start)?;
    for (&k, w) in closed.iter().zip(weights) {
        if w <= 0.0 {
            continue;
        }
        let class = &comps[k];
        for (i, p) in class.iter().zip(stationary_on(chain, class)?) {
            dist[*i] += w * p;
        }
    }
    Ok(dist)
}

fn reachable_from(chain: &SparseChain, start: usize) -> Vec<bool> {
    let mut seen = vec![false; chain.len()];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(i) = stack.pop() {
        for &(j, p) in &chain[i] {
            if p > 0.0 && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen
}

/// Tarjan's algorithm restricted to `active` nodes.
fn strongly_connected(chain: &SparseChain, active: &[bool]) -> Vec<Vec<usize>> {
    struct State<'a> {
        chain: &'a SparseChain,
        index: Vec<Option<usize>>,
        low: Vec<usize>,
        on_stack: Vec<bool>,
        stack: Vec<usize>,
        next: usize,
        out: Vec<Vec<usize>>,
    }

    fn visit(s: &mut State<'_>, v: usize) {
        s.index[v] = Some(s.next);
        s.low[v] = s.next;
        s.next += 1;
        s.stack.push(v);
        s.on_stack[v] = true;
        for &(w, p) in &s.chain[v] {
            if p <= 0.0 {
                continue;
            }
            match s.index[w] {
                None => {
                    visit(s, w);
                    s.low[v] = s.low[v].min(s.low[w]);
                }
                Some(iw) if s.on_stack[w] => s.low[v] = s.low[v].min(iw),
                _ => {}
            }
        }
        if Some(s.low[v]) == s.index[v] {
            let mut comp = Vec::new();
            while let Some(w) = s.stack.pop() {
                s.on_stack[w] = false;
                comp.push(w);
                if w == v {
                    break;
                }
            }
            comp.sort_unstable();
            s.out.push(comp);
        }
    }

    let n = chain.len();
    let mut s = State {
        chain,
        index: vec![None; n],
        low: vec![0; n],
        on_stack: vec![false; n],
        stack: Vec::new(),
        next: 0,
        out: Vec::new(),
    };
    for v in 0..n {
        if active[v] && s.index[v].is_none() {
            visit(&mut s, v);
        }
    }
    s.out
}

/// Stationary distribution of the chain restricted to a closed class.
fn stationary_on(chain: &SparseChain, class: &[usize]) -> Result<Vec<f64>> {
    let m = class.len();
    if m == 1 {
        return Ok(vec![1.0]);
    }
    let mut local = vec![usize::MAX; chain.len()];
    for (k, &i) in class.iter().enumerate() {
        local[i] = k;
    }
    // (Pᵀ − I) π = 0 with the last equation replaced by Σ π = 1
    let mut a = DMatrix::<f64>::zeros(m, m);
    for (k, &i) in class.iter().enumerate() {
        a[(k, k)] -= 1.0;
        for &(j, p) in &chain[i] {
            if p > 0.0 {
                a[(local[j], k)] += p;
            }
        }
    }
    for k in 0..m {
        a[(m - 1, k)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(m);
    rhs[m - 1] = 1.0;
    let pi = a.lu().solve(&rhs).ok_or(Error::SingularSystem)?;
    Ok(pi.iter().map(|p| p.max(0.0)).collect())
}

fn absorption_weights(
    chain: &SparseChain,
    reachable: &[bool],
    comp_of: &[usize],
    closed: &[usize],
    start: usize,
) -> Result<Vec<f64>> {
    if let Some(pos) = closed.iter().position(|&k| comp_of[start] == k) {
        let mut w = vec![0.0; closed.len()];
        w[pos] = 1.0;
        return Ok(w);
    }
    let transient: Vec<usize> = (0..chain.len())
        .filter(|&i| reachable[i] && !closed.contains(&comp_of[i]))
        .collect();
    let mut local = vec![usize::MAX; chain.len()];
    for (k, &i) in transient.iter().enumerate() {
        local[i] = k;
    }
    let m = transient.len();
    let mut a = DMatrix::<f64>::identity(m, m);
    let mut rhs = DMatrix::<f64>::zeros(m, closed.len());
    for (k, &i) in transient.iter().enumerate() {
        for &(j, p) in &chain[i] {
            if p <= 0.0 {
                continue;
            }
            if local[j] != usize::MAX {
                a[(k, local[j])] -= p;
            } else if let Some(c) = closed.iter().position(|&c| c == comp_of[j]) {
                rhs[(k, c)] += p;
            }
        }
    }
    let sol = a.lu().solve(&rhs).ok_or(Error::SingularSystem)?;
    Ok((0..closed.len()).map(|c| sol[(local[start], c)]).collect())
}
