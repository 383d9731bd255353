//! Finite-difference verification of reverse-mode gradients.

use super::{Tape, Tensor, TensorError};

/// Worst observed disagreement between reverse mode and central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_discrepancy: f64,
    pub worst_input: usize,
    pub worst_coordinate: usize,
}

/// Runs `f` on fresh leaves built from `inputs`, then compares the tape
/// gradient of the scalar output against central differences with the given
/// step, one coordinate at a time. Discrepancy per coordinate is
/// |ad - fd| / max(1, |ad|, |fd|), so near-zero gradients are compared
/// absolutely and large ones relatively.
pub fn grad_check<F>(
    f: F,
    inputs: &[(Vec<usize>, Vec<f64>)],
    step: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor, TensorError>,
{
    let eval = |datas: &[Vec<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let leaves: Vec<Tensor> = inputs
            .iter()
            .zip(datas)
            .map(|((shape, _), data)| tape.leaf(shape.clone(), data.clone()))
            .collect();
        let out = f(&mut tape, &leaves)?;
        if out.len() != 1 {
            return Err(TensorError::NonScalarLoss(out.shape().to_vec()));
        }
        Ok(out.item())
    };

    // Reverse-mode gradients from one base evaluation.
    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(shape, data)| tape.leaf(shape.clone(), data.clone()))
        .collect();
    let out = f(&mut tape, &leaves)?;
    if out.len() != 1 {
        return Err(TensorError::NonScalarLoss(out.shape().to_vec()));
    }
    let grads = tape.backward(&out)?;
    let ad: Vec<Vec<f64>> = leaves
        .iter()
        .map(|leaf| {
            grads
                .get(&leaf.node_id().expect("leaves are recorded"))
                .map(|t| t.data().to_vec())
                // A leaf the output never touches has gradient zero.
                .unwrap_or_else(|| vec![0.0; leaf.len()])
        })
        .collect();

    let mut report = GradCheckReport {
        max_discrepancy: 0.0,
        worst_input: 0,
        worst_coordinate: 0,
    };
    let mut datas: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    for i in 0..inputs.len() {
        for j in 0..datas[i].len() {
            let original = datas[i][j];
            datas[i][j] = original + step;
            let plus = eval(&datas)?;
            datas[i][j] = original - step;
            let minus = eval(&datas)?;
            datas[i][j] = original;

            let fd = (plus - minus) / (2.0 * step);
            let a = ad[i][j];
            if !fd.is_finite() || !a.is_finite() {
                return Err(TensorError::NonFinite(format!(
                    "grad_check at input {i} coordinate {j}: ad={a}, fd={fd}"
                )));
            }
            let disc = (a - fd).abs() / 1.0_f64.max(a.abs()).max(fd.abs());
            if disc > report.max_discrepancy {
                report.max_discrepancy = disc;
                report.worst_input = i;
                report.worst_coordinate = j;
            }
        }
    }
    Ok(report)
}
