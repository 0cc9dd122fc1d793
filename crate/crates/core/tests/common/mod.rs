//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use layertie::qcontroller::QNet;
use layertie::tying::{ActionVector, TyingState};

/// Union-find over the edges `i -- a[i]`, labelling each component by its
/// smallest member.
pub fn union_find_canonical(a: &[usize]) -> Vec<usize> {
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut x = x;
        while p[x] != r {
            let next = p[x];
            p[x] = r;
            x = next;
        }
        r
    }
    let n = a.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for (i, &t) in a.iter().enumerate() {
        let (ri, rt) = (find(&mut parent, i), find(&mut parent, t));
        if ri != rt {
            let (lo, hi) = if ri < rt { (ri, rt) } else { (rt, ri) };
            parent[hi] = lo;
        }
    }
    (0..n).map(|i| find(&mut parent, i)).collect()
}

/// Every action vector with `a[i] in 0..=i`, in odometer order.
pub fn all_actions(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut a = vec![0; n];
    loop {
        out.push(a.clone());
        let mut i = n;
        loop {
            if i <= 1 {
                return out;
            }
            i -= 1;
            if a[i] < i {
                a[i] += 1;
                break;
            }
            a[i] = 0;
        }
    }
}

/// Joint Q-value of an action computed from scratch out of the packed
/// output: row `i` (1-based layer) starts at `sum_{j<i} (j+1)`.
pub fn joint_q(out: &[f64], a: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut start = 0;
    for (i, &c) in a.iter().enumerate().skip(1) {
        total += out[start + c];
        start += i + 1;
    }
    total
}

/// Exhaustive search over all joint actions; ties go to the first action
/// in odometer order.
pub fn brute_force_best(net: &QNet, s: &TyingState) -> (Vec<usize>, f64) {
    let out = net.forward(s).unwrap();
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    for a in all_actions(s.n_layers()) {
        let q = joint_q(&out, &a);
        if q > best.1 {
            best = (a, q);
        }
    }
    best
}

pub fn action(v: &[usize]) -> ActionVector {
    ActionVector::new(v.to_vec()).unwrap()
}
