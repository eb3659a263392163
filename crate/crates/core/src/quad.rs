//! Adaptive tensor-product Gauss-Kronrod quadrature on a square.
//!
//! The channel module integrates vector-valued functions of two variables
//! whose mass may concentrate on narrow ridges when one observation-variance
//! direction is small. Two design points deal with that:
//!
//! * every call starts from a uniform `2^min_depth x 2^min_depth` grid, so a
//!   ridge of width comparable to the initial node spacing cannot be missed
//!   by a single coarse panel whose error estimate happens to vanish;
//! * refinement proceeds in sweeps that split every panel above the current
//!   error threshold at once. Mirror-image panels therefore refine together,
//!   which keeps the node set symmetric about the origin and lets odd
//!   integrands cancel to rounding noise instead of to the error tolerance.
//!
//! All components share one node set; error control uses the worst
//! component. This matters downstream: centered finite differences of the
//! integrals are taken componentwise, and shared nodes make the quadrature
//! error cancel in the difference.

/// 15-point Kronrod abscissae (positive half), embedding 7-point Gauss.
const XGK: [f64; 8] = [
    0.991455371120813,
    0.949107912342759,
    0.864864423359769,
    0.741531185599394,
    0.586087235467691,
    0.405845151377397,
    0.207784955007898,
    0.000000000000000,
];

/// Kronrod weights matching `XGK`.
const WGK: [f64; 8] = [
    0.022935322010529,
    0.063092092629979,
    0.104790010322250,
    0.140653259715525,
    0.169004726639267,
    0.190350578064785,
    0.204432940075298,
    0.209482141084728,
];

/// Gauss weights for `XGK[1], XGK[3], XGK[5], XGK[7]`.
const WG: [f64; 4] = [
    0.129484966168870,
    0.279705391489277,
    0.381830050505119,
    0.417959183673469,
];

const N_NODES: usize = 15;

/// Node offsets in `[-1, 1]` and the paired Kronrod / Gauss weights
/// (`gauss == 0` marks Kronrod-only nodes).
fn rule() -> ([f64; N_NODES], [f64; N_NODES], [f64; N_NODES]) {
    let mut x = [0.0; N_NODES];
    let mut wk = [0.0; N_NODES];
    let mut wg = [0.0; N_NODES];
    for i in 0..7 {
        x[i] = -XGK[i];
        x[14 - i] = XGK[i];
        wk[i] = WGK[i];
        wk[14 - i] = WGK[i];
        if i % 2 == 1 {
            wg[i] = WG[i / 2];
            wg[14 - i] = WG[i / 2];
        }
    }
    x[7] = 0.0;
    wk[7] = WGK[7];
    wg[7] = WG[3];
    (x, wk, wg)
}

#[derive(Debug, Clone)]
pub struct QuadOptions {
    /// Stop refining once the summed error estimate falls below this.
    pub abs_tol: f64,
    /// Initial uniform subdivision: `2^min_depth` panels per axis.
    pub min_depth: u32,
    /// Hard cap on the number of panels.
    pub max_cells: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        QuadOptions { abs_tol: 1e-8, min_depth: 2, max_cells: 32768 }
    }
}

#[derive(Debug, Clone)]
pub struct QuadResult {
    /// One integral estimate per component.
    pub value: Vec<f64>,
    /// Summed panel error estimate (worst component per panel).
    pub error: f64,
    /// Panels evaluated in total.
    pub cells: usize,
}

struct Cell {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    value: Vec<f64>,
    error: f64,
}

fn eval_cell<F>(f: &F, x0: f64, x1: f64, y0: f64, y1: f64, n_comp: usize, buf: &mut [f64]) -> Cell
where
    F: Fn(f64, f64, &mut [f64]),
{
    let (nodes, wk, wg) = rule();
    let cx = 0.5 * (x0 + x1);
    let cy = 0.5 * (y0 + y1);
    let hx = 0.5 * (x1 - x0);
    let hy = 0.5 * (y1 - y0);
    let mut kron = vec![0.0; n_comp];
    let mut gauss = vec![0.0; n_comp];
    for i in 0..N_NODES {
        let xi = cx + hx * nodes[i];
        for j in 0..N_NODES {
            let yj = cy + hy * nodes[j];
            buf.fill(0.0);
            f(xi, yj, buf);
            let wkk = wk[i] * wk[j];
            for c in 0..n_comp {
                kron[c] += wkk * buf[c];
            }
            let wgg = wg[i] * wg[j];
            if wgg != 0.0 {
                for c in 0..n_comp {
                    gauss[c] += wgg * buf[c];
                }
            }
        }
    }
    let scale = hx * hy;
    let mut err = 0.0_f64;
    for c in 0..n_comp {
        err = err.max((kron[c] - gauss[c]).abs() * scale);
        kron[c] *= scale;
    }
    Cell { x0, x1, y0, y1, value: kron, error: err }
}

/// Integrates `f` over `[lo, hi]^2`. `f(x, y, out)` must add nothing and
/// write each of the `n_comp` components into `out`.
pub fn adaptive_2d<F>(f: &F, lo: f64, hi: f64, n_comp: usize, opts: &QuadOptions) -> QuadResult
where
    F: Fn(f64, f64, &mut [f64]),
{
    assert!(hi > lo, "empty quadrature domain");
    let mut buf = vec![0.0; n_comp];
    let panels = 1usize << opts.min_depth;
    let step = (hi - lo) / panels as f64;
    let mut cells: Vec<Cell> = Vec::with_capacity(panels * panels);
    for i in 0..panels {
        let x0 = lo + i as f64 * step;
        let x1 = if i + 1 == panels { hi } else { lo + (i + 1) as f64 * step };
        for j in 0..panels {
            let y0 = lo + j as f64 * step;
            let y1 = if j + 1 == panels { hi } else { lo + (j + 1) as f64 * step };
            cells.push(eval_cell(f, x0, x1, y0, y1, n_comp, &mut buf));
        }
    }

    loop {
        let total_err: f64 = cells.iter().map(|c| c.error).sum();
        let max_err = cells.iter().fold(0.0_f64, |m, c| m.max(c.error));
        if total_err <= opts.abs_tol || cells.len() >= opts.max_cells || max_err == 0.0 {
            break;
        }
        // Split every panel above the sweep threshold; splitting mirror
        // panels in the same sweep preserves node symmetry.
        let threshold = (max_err / 8.0).max(opts.abs_tol / (2.0 * cells.len() as f64));
        let mut next: Vec<Cell> = Vec::with_capacity(cells.len() + 64);
        let mut split_any = false;
        for cell in cells {
            if cell.error >= threshold && next.len() + 4 <= opts.max_cells + 3 {
                let mx = 0.5 * (cell.x0 + cell.x1);
                let my = 0.5 * (cell.y0 + cell.y1);
                next.push(eval_cell(f, cell.x0, mx, cell.y0, my, n_comp, &mut buf));
                next.push(eval_cell(f, cell.x0, mx, my, cell.y1, n_comp, &mut buf));
                next.push(eval_cell(f, mx, cell.x1, cell.y0, my, n_comp, &mut buf));
                next.push(eval_cell(f, mx, cell.x1, my, cell.y1, n_comp, &mut buf));
                split_any = true;
            } else {
                next.push(cell);
            }
        }
        cells = next;
        if !split_any {
            break;
        }
    }

    let mut value = vec![0.0; n_comp];
    for cell in &cells {
        for c in 0..n_comp {
            value[c] += cell.value[c];
        }
    }
    let error = cells.iter().map(|c| c.error).sum();
    QuadResult { value, error, cells: cells.len() }
}
