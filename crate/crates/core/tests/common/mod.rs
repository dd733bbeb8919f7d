//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::io::Write;

use mechxfer_core::linalg::solve;
use mechxfer_core::ridge::fit_krr;
use mechxfer_core::Tensor;

/// Optimal value of `min 1/2 a'Ka` over `0 <= a_i <= upper`, `sum a = 1`, by
/// enumerating every lower/upper/free assignment and solving the KKT system
/// of the free block. Only for tiny problems (3^n assignments).
pub fn qp_oracle(k: &Tensor, upper: f64) -> f64 {
    let n = k.rows();
    assert!(n <= 8, "oracle is exponential in n");
    let mut best = f64::INFINITY;
    let total = 3usize.pow(n as u32);
    for code in 0..total {
        // 0 = at zero, 1 = at upper, 2 = free
        let mut state = Vec::with_capacity(n);
        let mut c = code;
        for _ in 0..n {
            state.push(c % 3);
            c /= 3;
        }
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 2).collect();
        let mut a: Vec<f64> = state.iter().map(|&s| if s == 1 { upper } else { 0.0 }).collect();
        let fixed_sum: f64 = a.iter().sum();
        if free.is_empty() {
            if (fixed_sum - 1.0).abs() > 1e-12 {
                continue;
            }
        } else {
            // [K_FF 1; 1' 0] [a_F; -mu] = [-K_FB a_B; 1 - sum a_B]
            let f = free.len();
            let mut m = Tensor::zeros(f + 1, f + 1);
            let mut rhs = vec![0.0; f + 1];
            for (r, &i) in free.iter().enumerate() {
                for (c, &j) in free.iter().enumerate() {
                    m.set(r, c, k.get(i, j));
                }
                m.set(r, f, 1.0);
                m.set(f, r, 1.0);
                rhs[r] = -(0..n).filter(|j| state[*j] == 1).map(|j| k.get(i, j) * upper).sum::<f64>();
            }
            rhs[f] = 1.0 - fixed_sum;
            let Ok(sol) = solve(&m, &rhs) else { continue };
            if sol.iter().any(|v| !v.is_finite()) {
                continue;
            }
            for (r, &i) in free.iter().enumerate() {
                a[i] = sol[r];
            }
            if free.iter().any(|&i| a[i] < -1e-12 || a[i] > upper + 1e-12) {
                continue;
            }
        }
        let mut obj = 0.0;
        for i in 0..n {
            for j in 0..n {
                obj += a[i] * a[j] * k.get(i, j);
            }
        }
        best = best.min(0.5 * obj);
    }
    best
}

/// LOOCV MSE by refitting KRR without each held-out row.
pub fn brute_loocv(x: &Tensor, y: &[f64], lambda: f64, gamma: f64, held_out: &[usize]) -> f64 {
    let m = x.rows();
    let mut total = 0.0;
    for &i in held_out {
        let keep: Vec<usize> = (0..m).filter(|&j| j != i).collect();
        let ys: Vec<f64> = keep.iter().map(|&j| y[j]).collect();
        let model = fit_krr(&x.select_rows(&keep), &ys, lambda, gamma).unwrap();
        let r = y[i] - model.predict(x.row(i));
        total += r * r;
    }
    total / held_out.len() as f64
}

/// `exp(-|a-b|^2 / gamma)` Gram matrix, written out independently.
pub fn gram(x: &Tensor, gamma: f64) -> Tensor {
    let n = x.rows();
    let mut k = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let d: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            k.set(i, j, (-d / gamma).exp());
        }
    }
    k
}

/// Prints one acceptance line and returns whether it passed.
/// Writes to the stdout handle rather than through `println!`, so the line
/// shows up even when the harness captures output.
pub fn report(name: &str, pass: bool, detail: String) -> bool {
    let line = format!("[{}] {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    pass
}
