//! Adam with decoupled weight decay.

use ndarray::ArrayD;

use crate::params::{GradSet, ParamGroup, ParamStore};

/// Adam moment estimates for one optimiser group. Weight decay is decoupled:
/// it is applied with the step rather than added to the gradient.
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub t: u64,
    m: Vec<Option<ArrayD<f32>>>,
    v: Vec<Option<ArrayD<f32>>>,
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32, weight_decay: f32, store_len: usize) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: (0..store_len).map(|_| None).collect(),
            v: (0..store_len).map(|_| None).collect(),
        }
    }

    /// Applies one update to every parameter of `group` that received a
    /// gradient. Parameters not touched by the step keep their moments
    /// unchanged.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradSet, group: ParamGroup, lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in store.group_ids(group) {
            let Some(grad) = grads.get(id) else {
                continue;
            };
            let m = self.m[id.0].get_or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self.v[id.0].get_or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let value = store.value_mut(id);
            for ((p, g), (m, v)) in value
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
            }
        }
    }

    /// Moment arrays for checkpointing, keyed by parameter name. Absent
    /// moments (parameters never updated) are skipped.
    pub fn state(&self, store: &ParamStore) -> AdamState {
        let mut m = Vec::new();
        let mut v = Vec::new();
        for id in store.ids() {
            if let Some(arr) = &self.m[id.0] {
                m.push((store.name(id).to_string(), arr.clone()));
            }
            if let Some(arr) = &self.v[id.0] {
                v.push((store.name(id).to_string(), arr.clone()));
            }
        }
        AdamState { t: self.t, m, v }
    }

    /// Restores moments saved by [`Adam::state`].
    pub fn load_state(&mut self, store: &ParamStore, state: &AdamState) -> Result<(), String> {
        self.t = state.t;
        for (name, arr) in &state.m {
            let id = store
                .find(name)
                .ok_or_else(|| format!("unknown parameter {name} in optimizer state"))?;
            self.m[id.0] = Some(arr.clone());
        }
        for (name, arr) in &state.v {
            let id = store
                .find(name)
                .ok_or_else(|| format!("unknown parameter {name} in optimizer state"))?;
            self.v[id.0] = Some(arr.clone());
        }
        Ok(())
    }
}

/// Serializable snapshot of an [`Adam`] instance.
pub struct AdamState {
    pub t: u64,
    pub m: Vec<(String, ArrayD<f32>)>,
    pub v: Vec<(String, ArrayD<f32>)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{normal_init, Graph};
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// One Adam step on a single scalar, checked against the update rule
    /// evaluated by hand.
    #[test]
    fn first_step_matches_hand_computation() {
        let mut store = ParamStore::new();
        let id = store.add(
            "p",
            ArrayD::from_elem(IxDyn(&[1]), 2.0f32),
            ParamGroup::Generator,
        );
        let mut graph = Graph::training(&store, ParamGroup::Generator);
        let p = graph.param(id);
        let sq = graph.tape.square(p);
        let loss = graph.tape.mean_all(sq);
        graph.tape.backward(loss);
        let grads = graph.collect_grads(ParamGroup::Generator);
        drop(graph);
        // d(p²)/dp = 4.0
        let mut adam = Adam::new(0.5, 0.999, 0.0, store.len());
        adam.step(&mut store, &grads, ParamGroup::Generator, 0.1);
        let g = 4.0f32;
        let m = 0.5 * g;
        let v = 0.001 * g * g;
        let mhat = m / 0.5;
        let vhat = v / 0.001;
        let expect = 2.0 - 0.1 * (mhat / (vhat.sqrt() + 1e-8));
        let got = store.value(id)[[0]];
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
    }

    #[test]
    fn decoupled_weight_decay_shrinks_parameters_without_gradient_coupling() {
        let mut store = ParamStore::new();
        let id = store.add(
            "p",
            ArrayD::from_elem(IxDyn(&[1]), 1.0f32),
            ParamGroup::Generator,
        );
        let mut graph = Graph::training(&store, ParamGroup::Generator);
        let p = graph.param(id);
        // Loss = 0·p keeps the gradient at exactly zero.
        let z = graph.tape.mul_scalar(p, 0.0);
        let loss = graph.tape.mean_all(z);
        graph.tape.backward(loss);
        let grads = graph.collect_grads(ParamGroup::Generator);
        drop(graph);
        let mut adam = Adam::new(0.9, 0.999, 0.1, store.len());
        adam.step(&mut store, &grads, ParamGroup::Generator, 0.5);
        let got = store.value(id)[[0]];
        assert!((got - (1.0 - 0.5 * 0.1)).abs() < 1e-6);
    }

    #[test]
    fn state_round_trip_restores_moments() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let id = store.add(
            "w",
            normal_init(&mut rng, &[3], 1.0),
            ParamGroup::Generator,
        );
        let mut adam = Adam::new(0.5, 0.99, 0.0, store.len());
        let mut graph = Graph::training(&store, ParamGroup::Generator);
        let p = graph.param(id);
        let sq = graph.tape.square(p);
        let loss = graph.tape.mean_all(sq);
        graph.tape.backward(loss);
        let grads = graph.collect_grads(ParamGroup::Generator);
        drop(graph);
        adam.step(&mut store, &grads, ParamGroup::Generator, 0.01);
        let state = adam.state(&store);
        let mut other = Adam::new(0.5, 0.99, 0.0, store.len());
        other.load_state(&store, &state).unwrap();
        assert_eq!(other.t, adam.t);
        let sm = &state.m[0].1;
        assert_eq!(sm.len(), 3);
    }
}
