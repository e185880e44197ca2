//! Exact min-cost assignment of agents to capacitated slots.
//!
//! The optimal value comes from an O(n^3) Hungarian (shortest augmenting
//! path with potentials) run over the slot-expanded square matrix. The
//! returned assignment is then reconstructed agent by agent: each agent
//! takes the choice that provably still completes to the optimal value,
//! preferring cheaper (then lower-id) slots, which makes the output
//! deterministic and keeps zero-cost agents in place whenever an optimum
//! allows it.

/// Solves min sum cost[agent][target] with per-target capacities.
/// `cost` is agents x targets; `capacity[t]` slots at target t; the total
/// capacity must equal the number of agents. Returns (assignment, total).
pub fn solve_capacitated(cost: &[Vec<f64>], capacity: &[u32]) -> (Vec<usize>, f64) {
    let n_agents = cost.len();
    let total_slots: u32 = capacity.iter().sum();
    assert_eq!(
        total_slots as usize, n_agents,
        "capacities ({total_slots}) must match agent count ({n_agents})"
    );
    if n_agents == 0 {
        return (Vec::new(), 0.0);
    }
    let n_targets = capacity.len();
    assert!(cost.iter().all(|row| row.len() == n_targets));

    let mut remaining: Vec<u32> = capacity.to_vec();
    let mut assignment = vec![usize::MAX; n_agents];
    for agent in 0..n_agents {
        // Evaluate every open target by its exact best completion value and
        // commit to the argmin; ties break by (own cost, target id), which
        // keeps a zero-cost agent in place whenever an optimum allows.
        let mut chosen: Option<(f64, f64, usize)> = None;
        for t in 0..n_targets {
            if remaining[t] == 0 {
                continue;
            }
            remaining[t] -= 1;
            let value = cost[agent][t] + lower_bound(cost, &remaining, agent + 1);
            remaining[t] += 1;
            let cand = (value, cost[agent][t], t);
            let better = match chosen {
                None => true,
                Some(best) => cand < best,
            };
            if better {
                chosen = Some(cand);
            }
        }
        let (_, _, t) = chosen.expect("capacities cover all agents");
        remaining[t] -= 1;
        assignment[agent] = t;
    }
    let total = assignment.iter().enumerate().map(|(a, &t)| cost[a][t]).sum();
    (assignment, total)
}

/// Exact optimal value for agents `from..` against the remaining slots.
fn lower_bound(cost: &[Vec<f64>], remaining: &[u32], from: usize) -> f64 {
    let n_agents = cost.len() - from;
    if n_agents == 0 {
        return 0.0;
    }
    // Expand targets into one column per free slot.
    let mut slots: Vec<usize> = Vec::new();
    for (t, &cap) in remaining.iter().enumerate() {
        for _ in 0..cap {
            slots.push(t);
        }
    }
    debug_assert_eq!(slots.len(), n_agents);
    let square: Vec<Vec<f64>> = (from..cost.len())
        .map(|a| slots.iter().map(|&t| cost[a][t]).collect())
        .collect();
    hungarian_value(&square)
}

/// Optimal value of a square assignment problem (Jonker-Volgenant style
/// shortest augmenting path with potentials).
fn hungarian_value(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    if n == 0 {
        return 0.0;
    }
    // 1-indexed potentials; way[j] is the augmenting-path parent column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=n {
        if p[j] != 0 {
            total += cost[p[j] - 1][j - 1];
        }
    }
    total
}
