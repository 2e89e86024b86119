use super::{Network, NnError, Tensor};

/// Result of comparing analytic gradients against central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Checks every parameter and input gradient of `net` for the scalar
/// objective `Σ probe ⊙ net(x)` using central differences with step `h`.
pub fn check_gradients(
    net: &Network,
    x: &Tensor,
    probe: &Tensor,
    h: f64,
) -> Result<GradCheck, NnError> {
    let objective = |n: &Network, input: &Tensor| -> Result<f64, NnError> {
        let y = n.predict(input)?;
        Ok(y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
    };

    let mut work = net.clone();
    work.zero_grad();
    let y = work.forward(x)?;
    if y.shape() != probe.shape() {
        return Err(NnError::Shape {
            layer: None,
            msg: "probe must match the network output".into(),
        });
    }
    let input_grad = work.backward(probe)?;
    let analytic = work.flat_grads();
    let params = net.flat_params();

    let mut max_rel: f64 = 0.0;
    let mut probe_net = net.clone();
    for i in 0..params.len() {
        let mut p = params.clone();
        p[i] += h;
        probe_net.set_flat_params(&p)?;
        let up = objective(&probe_net, x)?;
        p[i] -= 2.0 * h;
        probe_net.set_flat_params(&p)?;
        let down = objective(&probe_net, x)?;
        max_rel = max_rel.max(rel_error(analytic[i], (up - down) / (2.0 * h)));
    }
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let up = objective(net, &xp)?;
        xp.data_mut()[i] -= 2.0 * h;
        let down = objective(net, &xp)?;
        max_rel = max_rel.max(rel_error(input_grad.data()[i], (up - down) / (2.0 * h)));
    }
    Ok(GradCheck {
        max_rel_error: max_rel,
        checked: params.len() + x.len(),
    })
}
