use super::{Grid, GridMeasure};
use crate::error::{Error, Result};

const LP_CELL_LIMIT: usize = 1024;
const MASS_MATCH_TOL: f64 = 1e-10;
const FLOW_EPS: f64 = 1e-15;

/// Geodesic distance on the unit torus between cells `i` and `j`.
pub fn torus_distance(grid: Grid, i: usize, j: usize) -> f64 {
    let a = grid.position(i);
    let b = grid.position(j);
    let mut s = 0.0;
    for axis in 0..grid.dim() {
        let d = (a[axis] - b[axis]).abs();
        let d = d.min(1.0 - d);
        s += d * d;
    }
    s.sqrt()
}

fn check_pair(mu: &GridMeasure, nu: &GridMeasure) -> Result<()> {
    if mu.grid() != nu.grid() {
        return Err(Error::GridMismatch(format!("{:?} vs {:?}", mu.grid(), nu.grid())));
    }
    if (mu.mass() - nu.mass()).abs() > MASS_MATCH_TOL {
        return Err(Error::MassMismatch { left: mu.mass(), right: nu.mass() });
    }
    Ok(())
}

/// Monge-Kantorovich distance: circular CDF formula in 1-d, exact transport LP in 2-d.
pub fn w1_distance(mu: &GridMeasure, nu: &GridMeasure) -> Result<f64> {
    check_pair(mu, nu)?;
    if mu.grid().dim() == 1 {
        w1_cdf(mu, nu)
    } else {
        w1_lp(mu, nu)
    }
}

/// `h * min_c sum_i |F_i - c|` with `F` the cumulative mass difference; the optimal
/// offset is a median of `F`.
pub fn w1_cdf(mu: &GridMeasure, nu: &GridMeasure) -> Result<f64> {
    check_pair(mu, nu)?;
    let grid = mu.grid();
    if grid.dim() != 1 {
        return Err(Error::Unsupported("CDF formula is one-dimensional".into()));
    }
    let h = grid.h();
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = mu
        .density()
        .iter()
        .zip(nu.density())
        .map(|(a, b)| {
            acc += h * (a - b);
            acc
        })
        .collect();
    let mut sorted = cdf.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    for c in cdf.iter_mut() {
        *c = (*c - median).abs();
    }
    Ok(h * cdf.iter().sum::<f64>())
}

/// Exact optimal transport cost between cell masses by successive shortest paths
/// on the bipartite graph of surplus and deficit cells.
pub fn w1_lp(mu: &GridMeasure, nu: &GridMeasure) -> Result<f64> {
    check_pair(mu, nu)?;
    let grid = mu.grid();
    if grid.len() > LP_CELL_LIMIT {
        return Err(Error::OracleTooLarge { cells: grid.len() });
    }
    let vol = grid.cell_volume();
    let mut sources = Vec::new();
    let mut sinks = Vec::new();
    for (i, (a, b)) in mu.density().iter().zip(nu.density()).enumerate() {
        let d = vol * (a - b);
        if d > FLOW_EPS {
            sources.push((i, d));
        } else if d < -FLOW_EPS {
            sinks.push((i, -d));
        }
    }
    let cost: Vec<Vec<f64>> =
        sources.iter().map(|(i, _)| sinks.iter().map(|(j, _)| torus_distance(grid, *i, *j)).collect()).collect();
    let supply: Vec<f64> = sources.iter().map(|s| s.1).collect();
    let demand: Vec<f64> = sinks.iter().map(|s| s.1).collect();
    Ok(min_cost_transport(&cost, supply, demand))
}

/// Minimum `sum F_ij c_ij` over nonnegative `F` with row sums `supply` and column sums
/// at most `demand`, for nonnegative costs.
fn min_cost_transport(cost: &[Vec<f64>], mut supply: Vec<f64>, mut demand: Vec<f64>) -> f64 {
    let ns = supply.len();
    let nt = demand.len();
    if ns == 0 || nt == 0 {
        return 0.0;
    }
    let mut flow = vec![vec![0.0; nt]; ns];
    let mut pot_s = vec![0.0; ns];
    let mut pot_t = vec![0.0; nt];
    // Node ids: sources 0..ns, sinks ns..ns+nt.
    let total = ns + nt;
    loop {
        let remaining: f64 = supply.iter().sum();
        if remaining <= FLOW_EPS * ns as f64 {
            break;
        }
        let mut dist = vec![f64::INFINITY; total];
        let mut prev = vec![usize::MAX; total];
        let mut done = vec![false; total];
        for i in 0..ns {
            if supply[i] > FLOW_EPS {
                dist[i] = 0.0;
            }
        }
        loop {
            let mut best = usize::MAX;
            let mut bd = f64::INFINITY;
            for v in 0..total {
                if !done[v] && dist[v] < bd {
                    bd = dist[v];
                    best = v;
                }
            }
            if best == usize::MAX {
                break;
            }
            done[best] = true;
            if best < ns {
                let i = best;
                for j in 0..nt {
                    let v = ns + j;
                    if done[v] {
                        continue;
                    }
                    let rc = (cost[i][j] + pot_s[i] - pot_t[j]).max(0.0);
                    if bd + rc < dist[v] {
                        dist[v] = bd + rc;
                        prev[v] = i;
                    }
                }
            } else {
                let j = best - ns;
                for i in 0..ns {
                    if done[i] || flow[i][j] <= FLOW_EPS {
                        continue;
                    }
                    let rc = (-cost[i][j] - pot_s[i] + pot_t[j]).max(0.0);
                    if bd + rc < dist[i] {
                        dist[i] = bd + rc;
                        prev[i] = best;
                    }
                }
            }
        }
        let mut target = usize::MAX;
        let mut td = f64::INFINITY;
        for j in 0..nt {
            if demand[j] > FLOW_EPS && dist[ns + j] < td {
                td = dist[ns + j];
                target = ns + j;
            }
        }
        if target == usize::MAX {
            break;
        }
        for v in 0..total {
            let d = dist[v].min(td);
            if v < ns {
                pot_s[v] += d;
            } else {
                pot_t[v - ns] += d;
            }
        }
        // Bottleneck along the path back to a source with supply.
        let mut amount = demand[target - ns];
        let mut v = target;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u >= ns {
                // Reverse arc sink u -> source v cancels flow.
                amount = amount.min(flow[v][u - ns]);
            }
            v = u;
        }
        amount = amount.min(supply[v]);
        let start = v;
        let mut v = target;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u < ns {
                flow[u][v - ns] += amount;
            } else {
                flow[v][u - ns] -= amount;
            }
            v = u;
        }
        supply[start] -= amount;
        demand[target - ns] -= amount;
    }
    let mut total_cost = 0.0;
    for i in 0..ns {
        for j in 0..nt {
            total_cost += flow[i][j] * cost[i][j];
        }
    }
    total_cost
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transport_small_known() {
        let cost = vec![vec![1.0, 3.0], vec![2.0, 1.0]];
        let c = min_cost_transport(&cost, vec![0.5, 0.5], vec![0.5, 0.5]);
        assert!((c - 1.0).abs() < 1e-15);
    }

    #[test]
    fn transport_needs_reroute() {
        // Greedy fills (0,0) first; optimum uses (0,1) and (1,0).
        let cost = vec![vec![1.0, 2.0], vec![1.0, 10.0]];
        let c = min_cost_transport(&cost, vec![1.0, 1.0], vec![1.0, 1.0]);
        assert!((c - 3.0).abs() < 1e-14);
    }

    #[test]
    fn two_d_oracle_limit() {
        let g = Grid::new(2, 33).unwrap();
        let m = GridMeasure::uniform(g);
        assert!(matches!(w1_lp(&m, &m), Err(Error::OracleTooLarge { .. })));
    }
}
