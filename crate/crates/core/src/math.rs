//! Small fixed-size linear algebra generic over [`Real`].

use crate::ad::Real;

pub type V3<R> = [R; 3];
pub type M3<R> = [[R; 3]; 3];

pub fn cst3<R: Real>(v: [f64; 3]) -> V3<R> {
    [R::cst(v[0]), R::cst(v[1]), R::cst(v[2])]
}

pub fn val3<R: Real>(v: &V3<R>) -> [f64; 3] {
    [v[0].val(), v[1].val(), v[2].val()]
}

pub fn add3<R: Real>(a: V3<R>, b: V3<R>) -> V3<R> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3<R: Real>(a: V3<R>, b: V3<R>) -> V3<R> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale3<R: Real>(a: V3<R>, s: R) -> V3<R> {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot3<R: Real>(a: V3<R>, b: V3<R>) -> R {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm3<R: Real>(a: V3<R>) -> R {
    dot3(a, a).sqrt()
}

pub fn sub3f(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn dist3f(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = sub3f(a, b);
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// `m · v` for a constant matrix.
pub fn matvec_c<R: Real>(m: &[[f64; 3]; 3], v: V3<R>) -> V3<R> {
    [
        v[0] * m[0][0] + v[1] * m[0][1] + v[2] * m[0][2],
        v[0] * m[1][0] + v[1] * m[1][1] + v[2] * m[1][2],
        v[0] * m[2][0] + v[1] * m[2][1] + v[2] * m[2][2],
    ]
}

pub fn matvec<R: Real>(m: &M3<R>, v: V3<R>) -> V3<R> {
    [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
}

pub fn transpose<R: Real>(m: &M3<R>) -> M3<R> {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

pub fn matmul<R: Real>(a: &M3<R>, b: &M3<R>) -> M3<R> {
    let mut out = [[R::cst(0.0); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, o) in row.iter_mut().enumerate() {
            *o = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn matmul_f(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    matmul(a, b)
}

pub fn transpose_f(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    transpose(m)
}

pub fn identity3() -> [[f64; 3]; 3] {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

/// Rotation matrix of a (not necessarily unit) quaternion `(w, x, y, z)`.
pub fn quat_to_rot<R: Real>(q: [R; 4]) -> M3<R> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let one = R::cst(1.0);
    [
        [
            one - (y * y + z * z) * 2.0,
            (x * y - w * z) * 2.0,
            (x * z + w * y) * 2.0,
        ],
        [
            (x * y + w * z) * 2.0,
            one - (x * x + z * z) * 2.0,
            (y * z - w * x) * 2.0,
        ],
        [
            (x * z - w * y) * 2.0,
            (y * z + w * x) * 2.0,
            one - (x * x + y * y) * 2.0,
        ],
    ]
}
