//! Brute-force two-photon amplitudes for a balanced beamsplitter.
//!
//! Four single-photon modes: spatial port s ∈ {0, 1} times internal state
//! i ∈ {0, 1}, indexed m = 2s + i. Each input photon is a creation operator
//! Σ_m c_m a†_m. The splitter maps a†_{s,i} → Σ_s' U_{s's} a†_{s',i}. The
//! product of the two transformed operators is expanded over all (m₁, m₂)
//! and collected into normalized Fock-state amplitudes.

#![allow(dead_code, clippy::needless_range_loop)]

use std::f64::consts::FRAC_1_SQRT_2;

type Photon = [f64; 4];

const SPLITTER: [[f64; 2]; 2] = [
    [FRAC_1_SQRT_2, FRAC_1_SQRT_2],
    [FRAC_1_SQRT_2, -FRAC_1_SQRT_2],
];

fn photon(port: usize, internal: [f64; 2]) -> Photon {
    let mut c = [0.0; 4];
    c[2 * port] = internal[0];
    c[2 * port + 1] = internal[1];
    c
}

fn through_splitter(input: &Photon) -> Photon {
    let mut out = [0.0; 4];
    for s in 0..2 {
        for i in 0..2 {
            for s_out in 0..2 {
                out[2 * s_out + i] += SPLITTER[s_out][s] * input[2 * s + i];
            }
        }
    }
    out
}

/// (P(2,0), P(1,1), P(0,2)), with port 0 feeding detector A.
fn port_distribution(p1: Photon, p2: Photon) -> [f64; 3] {
    let o1 = through_splitter(&p1);
    let o2 = through_splitter(&p2);
    let mut c = [[0.0; 4]; 4];
    for m1 in 0..4 {
        for m2 in 0..4 {
            c[m1][m2] = o1[m1] * o2[m2];
        }
    }
    let mut probs = [0.0; 3];
    let mut norm = 0.0;
    for m1 in 0..4 {
        for m2 in m1..4 {
            let amp = if m1 == m2 {
                std::f64::consts::SQRT_2 * c[m1][m1]
            } else {
                c[m1][m2] + c[m2][m1]
            };
            let p = amp * amp;
            norm += p;
            let in_a = usize::from(m1 / 2 == 0) + usize::from(m2 / 2 == 0);
            // in_a = 2 → (2,0), 1 → (1,1), 0 → (0,2)
            probs[2 - in_a] += p;
        }
    }
    probs.map(|p| p / norm)
}

fn internal_pair(eta: f64) -> ([f64; 2], [f64; 2]) {
    ([1.0, 0.0], [eta, (1.0 - eta * eta).max(0.0).sqrt()])
}

/// Photons in opposite input ports with internal-state overlap η.
pub fn opposite_ports(eta: f64) -> [f64; 3] {
    let (a, b) = internal_pair(eta);
    port_distribution(photon(0, a), photon(1, b))
}

/// Both photons in input port 0 with internal-state overlap η.
pub fn same_port(eta: f64) -> [f64; 3] {
    let (a, b) = internal_pair(eta);
    port_distribution(photon(0, a), photon(0, b))
}
