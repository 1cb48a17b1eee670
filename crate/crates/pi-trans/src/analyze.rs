//! Static shape tracer and parameter / multiply-accumulate counter.
//!
//! Counting conventions: conv = k²·c_in·c_out·H_out·W_out MACs and
//! c_out·c_in·k² + c_out params; dense = in·out MACs per application site
//! and in·out + out params; attention = n²·(c/4) score + n²·c aggregation
//! MACs; BN counts gamma/beta as params (running stats excluded) and, like
//! all elementwise ops, zero MACs. MACs are reported per single image.

use crate::gan::PatchDiscriminator;
use crate::generator::{Generator, StageBlock};
use crate::nn::{BatchNormLayer, Conv2dLayer, DecoderHead, EncoderStem, UpsampleBlock};
use crate::pconvmlp::PConvMlpBlock;

#[derive(Debug, Clone)]
pub struct CostRow {
    pub name: String,
    /// Per-image output shape (c, h, w).
    pub out_shape: Vec<usize>,
    pub params: usize,
    pub macs: u64,
}

#[derive(Debug, Default)]
pub struct CostReport {
    pub generator_rows: Vec<CostRow>,
    pub discriminator_rows: Vec<CostRow>,
}

impl CostReport {
    pub fn generator_params(&self) -> usize {
        self.generator_rows.iter().map(|r| r.params).sum()
    }

    pub fn generator_macs(&self) -> u64 {
        self.generator_rows.iter().map(|r| r.macs).sum()
    }

    pub fn discriminator_params(&self) -> usize {
        self.discriminator_rows.iter().map(|r| r.params).sum()
    }

    pub fn discriminator_macs(&self) -> u64 {
        self.discriminator_rows.iter().map(|r| r.macs).sum()
    }

    pub fn total_params(&self) -> usize {
        self.generator_params() + self.discriminator_params()
    }

    pub fn total_macs(&self) -> u64 {
        self.generator_macs() + self.discriminator_macs()
    }

    pub fn rows(&self) -> impl Iterator<Item = &CostRow> {
        self.generator_rows.iter().chain(self.discriminator_rows.iter())
    }

    /// Plain text table plus the generator-only and combined totals.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<44} {:>16} {:>12} {:>14}\n", "layer", "out_shape", "params", "macs"));
        for r in self.rows() {
            let shape = r
                .out_shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            out.push_str(&format!("{:<44} {:>16} {:>12} {:>14}\n", r.name, shape, r.params, r.macs));
        }
        out.push_str(&format!(
            "\ngenerator:              {:>12} params  {:>14} macs  ({:.2} M, {:.2} GMac)\n",
            self.generator_params(),
            self.generator_macs(),
            self.generator_params() as f64 / 1e6,
            self.generator_macs() as f64 / 1e9,
        ));
        out.push_str(&format!(
            "discriminators (both):  {:>12} params  {:>14} macs  ({:.2} M, {:.2} GMac)\n",
            self.discriminator_params(),
            self.discriminator_macs(),
            self.discriminator_params() as f64 / 1e6,
            self.discriminator_macs() as f64 / 1e9,
        ));
        out.push_str(&format!(
            "generator + discriminators: {:>8} params  {:>14} macs  ({:.2} M, {:.2} GMac)\n",
            self.total_params(),
            self.total_macs(),
            self.total_params() as f64 / 1e6,
            self.total_macs() as f64 / 1e9,
        ));
        out
    }

    /// CSV with header `layer,out_shape,params,macs`.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("layer,out_shape,params,macs\n");
        for r in self.rows() {
            let shape = r
                .out_shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            out.push_str(&format!("{},{},{},{}\n", r.name, shape, r.params, r.macs));
        }
        out
    }
}

/// Walks layers mirroring the real forward, emitting one row per layer.
struct Tracer {
    rows: Vec<CostRow>,
}

impl Tracer {
    fn new() -> Tracer {
        Tracer { rows: Vec::new() }
    }

    fn conv(&mut self, name: &str, layer: &Conv2dLayer, shape: &[usize; 3]) -> [usize; 3] {
        let [c_in, h, w] = *shape;
        let [c_out, wc_in, k, _] = *layer.weight.shape() else { unreachable!() };
        debug_assert_eq!(c_in, wc_in, "{name}: channel mismatch in trace");
        let ho = (h + 2 * layer.padding - k) / layer.stride + 1;
        let wo = (w + 2 * layer.padding - k) / layer.stride + 1;
        self.rows.push(CostRow {
            name: name.to_string(),
            out_shape: vec![c_out, ho, wo],
            params: layer.weight.numel() + layer.bias.numel(),
            macs: (k * k * c_in * c_out * ho * wo) as u64,
        });
        [c_out, ho, wo]
    }

    fn bn(&mut self, name: &str, layer: &BatchNormLayer, shape: &[usize; 3]) -> [usize; 3] {
        self.rows.push(CostRow {
            name: name.to_string(),
            out_shape: shape.to_vec(),
            params: layer.gamma.numel() + layer.beta.numel(),
            macs: 0,
        });
        *shape
    }

    /// Dense layer applied at `sites` independent positions.
    fn dense(&mut self, name: &str, d_in: usize, d_out: usize, sites: usize, out_shape: Vec<usize>) {
        self.rows.push(CostRow {
            name: name.to_string(),
            out_shape,
            params: d_in * d_out + d_out,
            macs: (d_in * d_out * sites) as u64,
        });
    }

    fn attention(&mut self, name: &str, c: usize, n: usize, out_shape: Vec<usize>) {
        self.rows.push(CostRow {
            name: name.to_string(),
            out_shape,
            params: 0,
            macs: (n * n * (c / 4) + n * n * c) as u64,
        });
    }

    fn upsample2(&mut self, name: &str, shape: &[usize; 3]) -> [usize; 3] {
        let out = [shape[0], shape[1] * 2, shape[2] * 2];
        self.rows.push(CostRow { name: name.to_string(), out_shape: out.to_vec(), params: 0, macs: 0 });
        out
    }

    fn stem(&mut self, prefix: &str, stem: &EncoderStem, shape: [usize; 3]) -> [usize; 3] {
        let s = self.conv(&format!("{prefix}.conv1"), &stem.conv1, &shape);
        let s = self.bn(&format!("{prefix}.bn1"), &stem.bn1, &s);
        let s = self.conv(&format!("{prefix}.conv2"), &stem.conv2, &s);
        let s = self.bn(&format!("{prefix}.bn2"), &stem.bn2, &s);
        let s = self.conv(&format!("{prefix}.conv3"), &stem.conv3, &s);
        self.bn(&format!("{prefix}.bn3"), &stem.bn3, &s)
    }

    fn pconvmlp(&mut self, prefix: &str, blk: &PConvMlpBlock, shape: [usize; 3]) -> [usize; 3] {
        let s = self.conv(&format!("{prefix}.down_conv"), &blk.down_conv, &shape);
        let s = self.bn(&format!("{prefix}.down_bn"), &blk.down_bn, &s);
        let s = self.conv(&format!("{prefix}.conv"), &blk.conv, &s);
        let s = self.bn(&format!("{prefix}.bn"), &blk.bn, &s);
        let [c2, h, w] = s;
        let c = c2 / 2;
        let n = h * w;
        let (h_c, h_s) = blk.hidden_dims();
        let half = vec![c, h, w];
        self.dense(&format!("{prefix}.channel_fc1"), c, h_c, n, half.clone());
        self.dense(&format!("{prefix}.channel_fc2"), h_c, c, n, half.clone());
        self.dense(&format!("{prefix}.spatial_fc1"), n, h_s, c, half.clone());
        self.dense(&format!("{prefix}.spatial_fc2"), h_s, n, c, half);
        s
    }

    fn stage(&mut self, prefix: &str, stage: &StageBlock, shape: [usize; 3]) -> [usize; 3] {
        match stage {
            StageBlock::PConvMlp(b) => self.pconvmlp(prefix, b, shape),
            StageBlock::BasicConv(b) => {
                let s = self.conv(&format!("{prefix}.down_conv"), &b.down_conv, &shape);
                let s = self.bn(&format!("{prefix}.down_bn"), &b.down_bn, &s);
                let s = self.conv(&format!("{prefix}.conv"), &b.conv, &s);
                self.bn(&format!("{prefix}.bn"), &b.bn, &s)
            }
        }
    }

    fn upsample_block(&mut self, prefix: &str, blk: &UpsampleBlock, shape: [usize; 3]) -> [usize; 3] {
        let s = self.upsample2(&format!("{prefix}.nearest"), &shape);
        let s = self.conv(&format!("{prefix}.conv1"), &blk.conv1, &s);
        let s = self.bn(&format!("{prefix}.bn1"), &blk.bn1, &s);
        let s = self.conv(&format!("{prefix}.conv2"), &blk.conv2, &s);
        self.bn(&format!("{prefix}.bn2"), &blk.bn2, &s)
    }

    fn decoder_head(&mut self, prefix: &str, head: &DecoderHead, shape: [usize; 3]) -> [usize; 3] {
        let s = self.conv(&format!("{prefix}.conv1"), &head.conv1, &shape);
        let s = self.bn(&format!("{prefix}.bn1"), &head.bn1, &s);
        let s = self.conv(&format!("{prefix}.conv2"), &head.conv2, &s);
        let s = self.bn(&format!("{prefix}.bn2"), &head.bn2, &s);
        self.conv(&format!("{prefix}.conv3"), &head.conv3, &s)
    }
}

/// Per-layer rows of the generator at its configured resolution.
pub fn profile_generator(gen: &Generator) -> Vec<CostRow> {
    let mut t = Tracer::new();
    let size = gen.cfg.image_size;
    let input = [3, size, size];

    for (branch, name) in [(&gen.enc_aerial, "gen.enc_a"), (&gen.enc_semantic, "gen.enc_s")] {
        let mut s = t.stem(&format!("{name}.stem"), &branch.stem, input);
        for (i, stage) in branch.stages.iter().enumerate() {
            s = t.stage(&format!("{name}.stage{}", i + 1), stage, s);
        }
    }

    let [_, c2, c3, c4] = gen.cfg.level_channels();
    let [_, s2, s3, s4] = gen.cfg.level_sizes();
    let l4 = [c4, s4, s4];

    // Direct branch.
    let k3 = t.upsample_block("gen.dir.up43", &gen.dir_up43, l4);
    let k2 = t.upsample_block("gen.dir.up32", &gen.dir_up32, k3);
    let s = t.upsample_block("gen.dir.up_a", &gen.dir_tail.up_a, k2);
    let s = t.upsample_block("gen.dir.up_b", &gen.dir_tail.up_b, s);
    t.decoder_head("gen.dir.head", &gen.dir_tail.head, s);

    // Fused branch: attention chain then the decoder tail.
    if let Some(itms) = &gen.itms {
        for (m, (level, (c, sz))) in itms
            .iter()
            .zip(["l4", "l3", "l2"].iter().zip([(c4, s4), (c3, s3), (c2, s2)]))
        {
            let shape = [c, sz, sz];
            t.conv(&format!("gen.itm.{level}.q_proj"), &m.q_proj, &shape);
            t.conv(&format!("gen.itm.{level}.k_proj"), &m.k_proj, &shape);
            t.attention(&format!("gen.itm.{level}.attention"), c, sz * sz, shape.to_vec());
        }
    }
    let f3 = t.upsample_block("gen.fus.up43", &gen.fus_up43, l4);
    let f2 = t.upsample_block("gen.fus.up32", &gen.fus_up32, f3);
    let s = t.upsample_block("gen.fus.up_a", &gen.fus_tail.up_a, f2);
    let s = t.upsample_block("gen.fus.up_b", &gen.fus_tail.up_b, s);
    t.decoder_head("gen.fus.head", &gen.fus_tail.head, s);

    t.rows
}

/// Per-layer rows of one discriminator on (3, size, size) image pairs.
pub fn profile_discriminator(prefix: &str, d: &PatchDiscriminator, size: usize) -> Vec<CostRow> {
    let mut t = Tracer::new();
    let mut s = [6usize, size, size];
    d.trace_layers(&mut |name, conv, bn| {
        s = t.conv(&format!("{prefix}.{name}"), conv, &s);
        if let Some(bn) = bn {
            s = t.bn(&format!("{prefix}.{name}.bn"), bn, &s);
        }
    });
    t.rows
}

/// Full report: generator plus both discriminators at the generator's
/// configured resolution.
pub fn analyze_model(gen: &Generator, d_direct: &PatchDiscriminator, d_final: &PatchDiscriminator) -> CostReport {
    let size = gen.cfg.image_size;
    let mut discriminator_rows = profile_discriminator("d_direct", d_direct, size);
    discriminator_rows.extend(profile_discriminator("d_final", d_final, size));
    CostReport { generator_rows: profile_generator(gen), discriminator_rows }
}

/// Ordered (layer, output shape) list for the generator.
pub fn trace_shapes(gen: &Generator) -> Vec<(String, Vec<usize>)> {
    profile_generator(gen)
        .into_iter()
        .map(|r| (r.name, r.out_shape))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::DiscriminatorConfig;
    use crate::generator::GeneratorConfig;
    use crate::tensor::Rng;

    #[test]
    fn unit_layer_counts() {
        let mut rng = Rng::new(0, "an");
        let mut t = Tracer::new();

        // conv(3→16, k3): 3·16·9 + 16 = 448 params.
        let conv = Conv2dLayer::new(3, 16, 3, 2, 1, &mut rng);
        let out = t.conv("c", &conv, &[3, 64, 64]);
        assert_eq!(out, [16, 32, 32]);
        assert_eq!(t.rows[0].params, 448);
        // 9·3·16·32·32 MACs.
        assert_eq!(t.rows[0].macs, 442_368);

        // BN over 32 channels: 64 params.
        let bn = BatchNormLayer::new(32);
        t.bn("b", &bn, &[32, 8, 8]);
        assert_eq!(t.rows[1].params, 64);
        assert_eq!(t.rows[1].macs, 0);

        // dense 4096→256 with bias.
        t.dense("d", 4096, 256, 1, vec![256]);
        assert_eq!(t.rows[2].params, 1_048_832);

        // Attention at desk L4: c = 64, n = 16.
        t.attention("a", 64, 16, vec![64, 4, 4]);
        assert_eq!(t.rows[3].macs, 20_480);
        assert_eq!(t.rows[3].params, 0);

        // Zero-layer model sums to zero.
        let empty = CostReport::default();
        assert_eq!(empty.total_params(), 0);
        assert_eq!(empty.total_macs(), 0);
    }

    #[test]
    fn generator_params_match_dynamic_count_exactly() {
        for cfg in [GeneratorConfig { seed: 3, ..GeneratorConfig::desk() }, {
            GeneratorConfig { seed: 3, ..GeneratorConfig::desk() }.with_variant(crate::generator::Variant::A)
        }] {
            let gen = Generator::new(cfg).unwrap();
            let rows = profile_generator(&gen);
            let static_total: usize = rows.iter().map(|r| r.params).sum();
            assert_eq!(static_total, gen.param_count());
        }
    }

    #[test]
    fn discriminator_params_match_dynamic_count() {
        let d = PatchDiscriminator::new(&DiscriminatorConfig::full(), &mut Rng::new(1, "d")).unwrap();
        let rows = profile_discriminator("d", &d, 256);
        let static_total: usize = rows.iter().map(|r| r.params).sum();
        let mut dynamic = 0;
        d.visit_params("d", &mut |_, t| dynamic += t.numel());
        assert_eq!(static_total, dynamic);
        // 5-conv trace ends at 30×30.
        assert_eq!(rows.last().unwrap().out_shape, vec![1, 30, 30]);
    }

    #[test]
    fn conv_macs_scale_with_resolution() {
        // Stem is stride-exact (halving + preserving convs): MACs scale as H·W.
        let mut rng = Rng::new(2, "sc");
        let stem = EncoderStem::new(8, &mut rng);
        let mut t64 = Tracer::new();
        t64.stem("s", &stem, [3, 64, 64]);
        let mut t128 = Tracer::new();
        t128.stem("s", &stem, [3, 128, 128]);
        let m64: u64 = t64.rows.iter().map(|r| r.macs).sum();
        let m128: u64 = t128.rows.iter().map(|r| r.macs).sum();
        assert_eq!(m128, 4 * m64);

        // Params are input-shape invariant.
        let p64: usize = t64.rows.iter().map(|r| r.params).sum();
        let p128: usize = t128.rows.iter().map(|r| r.params).sum();
        assert_eq!(p64, p128);
    }
}
