use super::{Bind, Graph, ParamSet, Var};

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between the reverse-mode
/// gradient and central differences with step `h`, over every value of
/// `params`.
pub fn gradient_error(
    params: &ParamSet<f64>,
    h: f64,
    loss: impl Fn(&Graph<f64>, Bind<'_, f64>) -> Var,
) -> f64 {
    let g = Graph::new();
    let l = loss(&g, Bind::trainable(params));
    let grads = match g.backward(l) {
        Ok(grads) => grads.into_params(),
        Err(_) => return f64::INFINITY,
    };
    let eval = |p: &ParamSet<f64>| {
        let g = Graph::new();
        let l = loss(&g, Bind::frozen(p));
        g.scalar(l)
    };
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    let mut p = params.clone();
    for (key, t) in params.iter() {
        let analytic = grads.value_or_zero(key, t.shape());
        for i in 0..t.len() {
            let orig = t.data()[i];
            p.get_mut(key).expect("same keys").data_mut()[i] = orig + h;
            let up = eval(&p);
            p.get_mut(key).expect("same keys").data_mut()[i] = orig - h;
            let down = eval(&p);
            p.get_mut(key).expect("same keys").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12)
}
