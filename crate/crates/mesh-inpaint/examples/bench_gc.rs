use mesh_inpaint::fixtures;
use mesh_inpaint::gcn::{Architecture, GcnModel, ModelConfig, Phase};
use mesh_inpaint::losses::{self, LossWeights, MeshType};
use mesh_inpaint::pipeline::{build_features, gen_fake_holes, AugmentationConfig, RunSetup};
use mesh_inpaint::preprocess::{preprocess, PreprocessConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn check(hidden: usize, bn_eps: f64, slope: f64, h: f64, full_cad: bool) {
    let sphere = fixtures::uv_sphere(8, 7);
    let holed = fixtures::remove_k_ring_cap(&sphere, 0, 1);
    let pre = preprocess(&holed, &PreprocessConfig { remesh_iterations: 0, target_edge_length: None, smooth_steps: 5 }).unwrap();
    let arch = Architecture::Mgcn;
    let levels = 3usize;
    let setup = RunSetup::prepare(pre, arch, levels).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let masks = gen_fake_holes(&setup.pre.init_mesh, &setup.pre.real_mask,
        &AugmentationConfig { probability: 0.06, ring: 1, sets: 1 }, &mut rng).unwrap();
    let features = build_features(&setup.pre.displacement, masks[0].vertex());
    let mut model = GcnModel::new(ModelConfig { architecture: arch, hidden, levels, bn_eps, leaky_slope: slope, ..ModelConfig::sgcn() }, &mut rng).unwrap();
    for p in model.params_mut() {
        for v in p.value.iter_mut() { *v += 2e-3 * (rng.random::<f64>() - 0.5); }
    }
    let weights = if full_cad { LossWeights::preset(arch, MeshType::Cad) }
        else { LossWeights { lambda_pos: vec![0.35, 0.30, 0.20, 0.15], lambda_nrm: 0.0, lambda_reg: 0.0 } };
    let frozen = {
        let ctx = setup.graph_context();
        let (outputs, _) = model.forward(&ctx, &features, Phase::Train { update_stats: false }).unwrap();
        let x_cmp = setup.displaced_positions(&outputs);
        losses::bnf_target(&setup.loss_ctx.faces, &x_cmp[0], &setup.loss_ctx.face_adjacency, &setup.loss_ctx.bnf)
    };
    let mut loss = |model: &mut GcnModel, with_grad: bool| -> mesh_inpaint::Result<f64> {
        let ctx = setup.graph_context();
        let (outputs, tape) = model.forward(&ctx, &features, Phase::Train { update_stats: false })?;
        let x_cmp = setup.displaced_positions(&outputs);
        let (terms, grads) = losses::total_loss_with_target(&setup.loss_ctx, &x_cmp, &weights, Some(&frozen))?;
        if with_grad { model.backward(&ctx, tape.unwrap(), &grads)?; }
        Ok(terms.total)
    };
    let report = mesh_inpaint::gcn::grad_check(&mut model, &mut loss, h, 1e-4, None).unwrap();
    println!("mgcn hidden={hidden} eps={bn_eps:.0e} slope={slope} h={h:.0e} cad={full_cad}: max_rel={:.3e} worst={} passed={}",
        report.max_rel_error, report.worst_param, report.passed());
}

fn main() {
    check(8, 1e-5, 0.01, 1e-6, false); // exactness reference
    check(8, 1e-2, 0.2, 1e-5, false);
    check(8, 1e-2, 0.2, 1e-5, true);
    check(6, 1e-2, 0.2, 1e-5, true);
    check(8, 1e-1, 0.3, 1e-5, true);
}
