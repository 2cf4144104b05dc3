//! Fixed-dimension feature vector helpers.
//!
//! All summations run in index order in `f64` so that results are
//! bit-identical across runs and platforms.

/// Feature dimension shared by frame features, KV keys/values and text embeddings.
pub const DIM: usize = 64;

pub fn zeros() -> Vec<f64> {
    vec![0.0; DIM]
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn is_zero(a: &[f64]) -> bool {
    a.iter().all(|x| *x == 0.0)
}

/// Cosine similarity clamped to [-1, 1]; zero when either side is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// L2-normalizes in place. The zero vector stays zero.
pub fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// Mean of a list of vectors, accumulated in list order. Empty input gives zeros.
pub fn mean<'a, I>(vectors: I) -> Vec<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut acc = zeros();
    let mut n = 0usize;
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        n += 1;
    }
    if n > 0 {
        for a in acc.iter_mut() {
            *a /= n as f64;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_of_zero_vector_is_zero() {
        let mut a = zeros();
        a[0] = 1.0;
        assert_eq!(cosine(&a, &zeros()), 0.0);
        assert_eq!(cosine(&a, &a), 1.0);
    }

    #[test]
    fn mean_of_nothing_is_zero() {
        let empty: Vec<&[f64]> = Vec::new();
        assert!(is_zero(&mean(empty)));
    }
}
