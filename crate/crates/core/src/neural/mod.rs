//! Dense tensors, reverse-mode differentiation and the Q-network.

pub mod checkpoint;
pub mod net;
pub mod params;
pub mod tensor;

pub use net::{grad_check, HeadKind, InputSpec, LayerNoise, Network, NetworkConfig, Variant};
pub use params::{CheckpointError, Params};
pub use tensor::{positional_encoding, Tape, Tensor};

/// Scaled dot-product attention `softmax(Q Kᵀ / √d_k) V`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let empty = Params::new();
    let mut t = Tape::new(&empty);
    let (qn, kn, vn) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
    let s = t.matmul_bt(qn, kn);
    let s = t.scale(s, 1.0 / (q.cols as f64).sqrt());
    let p = t.softmax_rows(s);
    let out = t.matmul(p, vn);
    t.value(out).clone()
}

/// Affine map with factorized-noise perturbed weights; `None` noise is the
/// frozen-zero mode.
pub fn noisy_affine(x: &Tensor, mu_w: &Tensor, mu_b: &Tensor, sigma_w: &Tensor, sigma_b: &Tensor, noise: Option<&LayerNoise>) -> Tensor {
    let empty = Params::new();
    let mut t = Tape::new(&empty);
    let xn = t.constant(x.clone());
    let (mut w, mut b) = (t.constant(mu_w.clone()), t.constant(mu_b.clone()));
    if let Some(n) = noise {
        let sw = t.constant(sigma_w.clone());
        let nw = t.mul_const(sw, n.eps_w.clone());
        w = t.add(w, nw);
        let sb = t.constant(sigma_b.clone());
        let nb = t.mul_const(sb, n.eps_b.clone());
        b = t.add(b, nb);
    }
    let y = t.matmul(xn, w);
    let y = t.add_row(y, b);
    t.value(y).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{self, EnvConfig};
    use crate::estimation::{EstimatorBank, FilterKind};
    use crate::scenario::{default_scenario, randomize_episode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn sample_obs(seed: u64) -> (crate::scenario::Scenario, env::Observation, Vec<bool>) {
        let s = default_scenario();
        let init = randomize_episode(&s, seed).unwrap();
        let cfg = EnvConfig::default();
        let w = env::reset(&s, &init, &cfg, seed);
        let bank = EstimatorBank::for_episode(&s, &init, FilterKind::Ekf, &cfg.noise, 1, seed);
        let obs = env::observe(&s, &w, &bank, &cfg);
        let mut mask = vec![false; s.tasks.len() + 1];
        mask[0] = true;
        mask[2] = true;
        *mask.last_mut().unwrap() = true;
        (s, obs, mask)
    }

    #[test]
    fn positional_encoding_examples() {
        assert_eq!(positional_encoding(0, 0, 4), 0.0);
        assert_eq!(positional_encoding(0, 1, 4), 1.0);
        assert!((positional_encoding(1, 0, 4) - 0.841471).abs() < 1e-6);
        assert!((positional_encoding(3, 2, 8) - (3.0f64 / 10000f64.powf(0.25)).sin()).abs() < 1e-15);
    }

    #[test]
    fn attention_singletons_and_symmetry() {
        let q = Tensor::from_vec(1, 2, vec![0.3, -0.2]);
        let v = Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        assert_eq!(attention(&q, &q, &v).data, v.data);
        let k = Tensor::from_vec(2, 2, vec![0.5, 0.5, 0.5, 0.5]);
        let v = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 6.0]);
        let out = attention(&q, &k, &v);
        assert!((out.data[0] - 2.0).abs() < 1e-15 && (out.data[1] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn attention_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (q, k, v) = (random_tensor(3, 4, &mut rng), random_tensor(3, 4, &mut rng), random_tensor(3, 4, &mut rng));
        let out = attention(&q, &k, &v);
        for i in 0..3 {
            let scores: Vec<f64> = (0..3).map(|j| (0..4).map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() / 2.0).collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for c in 0..4 {
                let r: f64 = (0..3).map(|j| scores[j].exp() / z * v.at(j, c)).sum();
                assert!((out.at(i, c) - r).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(5, 7, &mut rng);
        let s = tensor::softmax_rows(&Tensor::from_vec(5, 7, x.data.iter().map(|v| v * 50.0).collect()));
        for r in 0..5 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn noisy_affine_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(2, 3, &mut rng);
        let (mw, mb) = (random_tensor(3, 4, &mut rng), random_tensor(1, 4, &mut rng));
        let (sw, sb) = (random_tensor(3, 4, &mut rng), random_tensor(1, 4, &mut rng));
        let plain = {
            let y = tensor::matmul(&x, &mw);
            Tensor::from_vec(2, 4, y.data.iter().enumerate().map(|(i, v)| v + mb.data[i % 4]).collect())
        };
        assert_eq!(noisy_affine(&x, &mw, &mb, &sw, &sb, None), plain);
        let noise = LayerNoise { eps_w: (0..12).map(|i| i as f64 * 0.1).collect(), eps_b: vec![0.5; 4] };
        let zero = (Tensor::zeros(3, 4), Tensor::zeros(1, 4));
        assert_eq!(noisy_affine(&x, &mw, &mb, &zero.0, &zero.1, Some(&noise)), plain);
        let a = noisy_affine(&x, &mw, &mb, &sw, &sb, Some(&noise));
        assert_ne!(a, plain);
        assert_eq!(a, noisy_affine(&x, &mw, &mb, &sw, &sb, Some(&noise)));
    }

    #[test]
    fn forward_is_finite_and_deterministic() {
        let (s, obs, mask) = sample_obs(1);
        for v in Variant::ALL {
            let net = Network::for_scenario(&s, NetworkConfig::default().with_variant(v), 5);
            let q = net.forward_q(&obs, &mask);
            assert_eq!(q.len(), s.tasks.len() + 1, "{}", v.name());
            assert!(q.iter().all(|x| x.is_finite()));
            assert_eq!(q, net.forward_q(&obs, &mask));
        }
    }

    #[test]
    fn sampled_noise_is_seed_deterministic() {
        let (s, obs, mask) = sample_obs(2);
        let mut a = Network::for_scenario(&s, NetworkConfig::default(), 5);
        let mut b = a.clone();
        a.sample_noise(&mut ChaCha8Rng::seed_from_u64(9));
        b.sample_noise(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.forward_q(&obs, &mask), b.forward_q(&obs, &mask));
        let mut frozen = a.clone();
        frozen.freeze_noise();
        assert_ne!(a.forward_q(&obs, &mask), frozen.forward_q(&obs, &mask));
    }

    #[test]
    fn dueling_shift_leaves_q_unchanged() {
        let (s, obs, mask) = sample_obs(3);
        let mut net = Network::for_scenario(&s, NetworkConfig::default().with_variant(Variant::NoNoisy), 5);
        let q0 = net.forward_q(&obs, &mask);
        let (id, _) = net.params.iter().enumerate().find(|(_, (n, _))| *n == "adv.2.b").map(|(i, x)| (i, x.0)).unwrap();
        net.params.get_mut(id).data[0] += 3.25;
        let q1 = net.forward_q(&obs, &mask);
        for (a, b) in q0.iter().zip(&q1) {
            assert!((a - b).abs() < 1e-12);
        }
        // Zero advantage weights give a constant advantage: Q = V everywhere.
        let (w2, _) = net.params.iter().enumerate().find(|(_, (n, _))| *n == "adv.2.w").map(|(i, x)| (i, x.0)).unwrap();
        net.params.get_mut(w2).data.fill(0.0);
        let q = net.forward_q(&obs, &mask);
        assert!(q.iter().all(|v| (v - q[0]).abs() < 1e-12));
    }

    fn weighted_loss(q: &[f64]) -> (f64, Vec<f64>) {
        let w: Vec<f64> = (0..q.len()).map(|i| 0.3 + 0.1 * i as f64).collect();
        let l = q.iter().zip(&w).map(|(a, b)| b * a * a).sum::<f64>();
        (l, q.iter().zip(&w).map(|(a, b)| 2.0 * b * a).collect())
    }

    #[test]
    fn grad_check_tiny_and_default() {
        let (s, obs, mask) = sample_obs(4);
        let tiny = NetworkConfig { d_model: 8, heads: 2, layers: 1, ..NetworkConfig::default() };
        for v in Variant::ALL {
            let net = Network::for_scenario(&s, tiny.clone().with_variant(v), 21);
            let err = grad_check(&net, &obs, &mask, &weighted_loss, 1e-4, 60, 1);
            assert!(err < 1e-4, "{} err {err}", v.name());
        }
        let net = Network::for_scenario(&s, NetworkConfig::default(), 22);
        let e1 = grad_check(&net, &obs, &mask, &weighted_loss, 1e-4, 40, 2);
        let e2 = grad_check(&net, &obs, &mask, &weighted_loss, 2e-4, 40, 2);
        assert!(e1 < 1e-4 && e2 < 1e-3, "{e1} {e2}");
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let (s, obs, mask) = sample_obs(5);
        let net = Network::for_scenario(&s, NetworkConfig { d_model: 8, heads: 2, layers: 1, ..Default::default() }, 1);
        let mut g = net.params.zeros_like();
        net.backward(&obs, &mask, |q| vec![0.0; q.len()], &mut g);
        assert!(g.iter().all(|(_, t)| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (s, obs, mask) = sample_obs(6);
        let net = Network::for_scenario(&s, NetworkConfig::default(), 8);
        let mut buf = Vec::new();
        checkpoint::write_network(&net, &mut buf).unwrap();
        let mut other = Network::for_scenario(&s, NetworkConfig::default(), 99);
        checkpoint::read_network_into(&mut other, &mut buf.as_slice()).unwrap();
        assert_eq!(other.params, net.params);
        let qa: Vec<u64> = net.forward_q(&obs, &mask).iter().map(|v| v.to_bits()).collect();
        let qb: Vec<u64> = other.forward_q(&obs, &mask).iter().map(|v| v.to_bits()).collect();
        assert_eq!(qa, qb);
        let mut wrong = Network::for_scenario(&s, NetworkConfig { d_model: 32, ..Default::default() }, 1);
        assert!(checkpoint::read_network_into(&mut wrong, &mut buf.as_slice()).is_err());
        buf[0] = b'X';
        assert!(matches!(checkpoint::read_network_into(&mut other, &mut buf.as_slice()), Err(CheckpointError::BadMagic)));
    }
}
