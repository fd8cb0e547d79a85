use crate::mesh::Vec3;

use super::NetError;

fn dist2(a: Vec3, b: Vec3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Greedy farthest point sampling from `seed_index`. Each step picks the
/// point farthest from the current selection, lowest index on ties.
pub fn fps(points: &[Vec3], count: usize, seed_index: usize) -> Result<Vec<usize>, NetError> {
    if count > points.len() {
        return Err(NetError::TooFewPoints {
            needed: count,
            got: points.len(),
        });
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    if seed_index >= points.len() {
        return Err(NetError::Shape(format!(
            "fps seed {seed_index} out of range for {} points",
            points.len()
        )));
    }
    let mut chosen = vec![false; points.len()];
    let mut min_d: Vec<f64> = points
        .iter()
        .map(|&p| dist2(p, points[seed_index]))
        .collect();
    let mut out = Vec::with_capacity(count);
    out.push(seed_index);
    chosen[seed_index] = true;
    while out.len() < count {
        let mut best = usize::MAX;
        for i in 0..points.len() {
            if !chosen[i] && (best == usize::MAX || min_d[i] > min_d[best]) {
                best = i;
            }
        }
        chosen[best] = true;
        out.push(best);
        for (i, d) in min_d.iter_mut().enumerate() {
            *d = d.min(dist2(points[i], points[best]));
        }
    }
    Ok(out)
}
