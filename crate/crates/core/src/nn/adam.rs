use super::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }

    /// Applies one bias-corrected update in place.
    pub fn step(&self, params: &mut ParamStore, grads: &Gradients, state: &mut AdamState) {
        state.t += 1;
        let bc1 = 1.0 - self.beta1.powi(state.t as i32);
        let bc2 = 1.0 - self.beta2.powi(state.t as i32);
        for (k, entry) in params.entries_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut state.m[k], &mut state.v[k], &grads.data[k]);
            for i in 0..entry.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                entry.data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
        AdamState { t: 0, m: zeros.clone(), v: zeros }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use rand::SeedableRng;

    fn quadratic_store() -> ParamStore {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamStore::new();
        p.add("x", &[2], Init::Constant(3.0), &mut rng);
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = quadratic_store();
        let mut grads = p.zero_grads();
        grads.data[0] = vec![4.0, -0.5];
        let mut state = AdamState::new(&p);
        Adam::new(0.1).step(&mut p, &grads, &mut state);
        // bias-corrected first step is lr * g / |g|
        assert!((p.entries()[0].data[0] - 2.9).abs() < 1e-7);
        assert!((p.entries()[0].data[1] - 3.1).abs() < 1e-7);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = quadratic_store();
        let before = p.clone();
        let mut grads = p.zero_grads();
        grads.data[0] = vec![1.0, 2.0];
        let mut state = AdamState::new(&p);
        Adam::new(0.0).step(&mut p, &grads, &mut state);
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = quadratic_store();
        let mut state = AdamState::new(&p);
        let adam = Adam::new(0.05);
        for _ in 0..2000 {
            let mut grads = p.zero_grads();
            grads.data[0] = p.entries()[0].data.iter().map(|x| 2.0 * (x - 1.0)).collect();
            adam.step(&mut p, &grads, &mut state);
        }
        assert!(p.entries()[0].data.iter().all(|x| (x - 1.0).abs() < 1e-3));
    }
}
