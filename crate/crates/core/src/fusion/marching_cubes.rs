//! Marching cubes with a case table built from face-wise edge pairing.
//!
//! On each cube face the boundary is walked counter-clockwise (seen from
//! outside); every edge entering the inside region is paired with the next
//! edge leaving it. Because adjacent cubes see a shared face with the same
//! corner values they produce the same segments, so the extracted surface
//! is closed wherever all cubes are defined.

use std::sync::OnceLock;

/// Corner offsets (x, y, z).
pub const CORNERS: [[i64; 3]; 8] =
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];

/// Cube edges as corner pairs.
pub const EDGES: [[usize; 2]; 12] =
    [[0, 1], [1, 2], [2, 3], [3, 0], [4, 5], [5, 6], [6, 7], [7, 4], [0, 4], [1, 5], [2, 6], [3, 7]];

const FACES: [[usize; 4]; 6] = [[0, 1, 2, 3], [4, 5, 6, 7], [0, 1, 5, 4], [3, 2, 6, 7], [0, 3, 7, 4], [1, 2, 6, 5]];

fn edge_between(a: usize, b: usize) -> usize {
    EDGES.iter().position(|e| (e[0] == a && e[1] == b) || (e[0] == b && e[1] == a)).expect("cube edge")
}

/// Face corner cycle oriented counter-clockwise seen from outside the cube.
fn oriented(face: [usize; 4]) -> [usize; 4] {
    let p = |c: usize| CORNERS[c].map(|v| v as f64 - 0.5);
    let (a, b, c) = (p(face[0]), p(face[1]), p(face[2]));
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - b[0], c[1] - b[1], c[2] - b[2]];
    let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    // Face centre points outward from the cube centre.
    let centre: Vec<f64> = (0..3).map(|k| face.iter().map(|&c| p(c)[k]).sum::<f64>() / 4.0).collect();
    let out = n[0] * centre[0] + n[1] * centre[1] + n[2] * centre[2];
    if out > 0.0 {
        face
    } else {
        [face[3], face[2], face[1], face[0]]
    }
}

fn build_case(case: usize) -> Vec<[usize; 3]> {
    let inside = |c: usize| case & (1 << c) != 0;
    let mut next = [usize::MAX; 12];
    for face in FACES {
        let f = oriented(face);
        let cyc: Vec<(usize, bool, bool)> = (0..4)
            .map(|k| {
                let (a, b) = (f[k], f[(k + 1) % 4]);
                (edge_between(a, b), !inside(a) && inside(b), inside(a) && !inside(b))
            })
            .collect();
        for k in 0..4 {
            if !cyc[k].1 {
                continue;
            }
            let leave = (1..4).map(|s| (k + s) % 4).find(|&m| cyc[m].2).expect("leaving edge");
            next[cyc[k].0] = cyc[leave].0;
        }
    }
    let mut tris = Vec::new();
    let mut used = [false; 12];
    for start in 0..12 {
        if next[start] == usize::MAX || used[start] {
            continue;
        }
        let mut lp = vec![start];
        used[start] = true;
        let mut e = next[start];
        while e != start {
            used[e] = true;
            lp.push(e);
            e = next[e];
        }
        for i in 1..lp.len() - 1 {
            tris.push([lp[0], lp[i], lp[i + 1]]);
        }
    }
    tris
}

/// Triangles (as cube edge triples) for each of the 256 corner sign cases.
/// Bit `c` of the case index is set when corner `c` is inside (value < 0).
pub fn case_table() -> &'static [Vec<[usize; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[usize; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(build_case).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn trivial_cases_are_empty() {
        assert!(case_table()[0].is_empty());
        assert!(case_table()[255].is_empty());
    }

    #[test]
    fn single_corner_is_one_triangle() {
        for c in 0..8 {
            assert_eq!(case_table()[1 << c].len(), 1);
            assert_eq!(case_table()[255 ^ (1 << c)].len(), 1);
        }
    }

    #[test]
    fn every_crossing_edge_is_used_and_loops_close() {
        for case in 0..256usize {
            let inside = |c: usize| case & (1 << c) != 0;
            let crossing: Vec<usize> = (0..12).filter(|&e| inside(EDGES[e][0]) != inside(EDGES[e][1])).collect();
            let tris = &case_table()[case];
            // Directed boundary edges of the triangle fan must cancel except
            // along the loop, and each crossing edge appears in some triangle.
            for e in &crossing {
                assert!(tris.iter().any(|t| t.contains(e)), "case {case} edge {e}");
            }
            let mut half: BTreeMap<(usize, usize), i32> = BTreeMap::new();
            for t in tris {
                for k in 0..3 {
                    *half.entry((t[k], t[(k + 1) % 3])).or_default() += 1;
                }
            }
            for (&(a, b), &n) in &half {
                let back = half.get(&(b, a)).copied().unwrap_or(0);
                assert!(n == 1 && back <= 1, "case {case}: edge ({a},{b}) used {n} times");
            }
        }
    }
}
