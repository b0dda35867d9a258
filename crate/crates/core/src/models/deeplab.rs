//! DeepLab-style network: inverted-residual encoder, atrous pyramid pooling, light decoder.

use super::{Builder, ModelConfig};
use crate::nn::{Conv2d, Graph, NodeId};
use crate::Scalar;

const STEM: usize = 32;
/// (base channels, stride, repeats, expansion) per stage; cumulative stride 2·1·2·2·2 = 16.
const STAGES: [(usize, usize, usize, usize); 4] = [(16, 1, 1, 1), (24, 2, 2, 4), (40, 2, 2, 4), (80, 2, 2, 4)];
/// Stage whose output feeds the decoder skip (stride 4).
const LOW_LEVEL_STAGE: usize = 1;
const ASPP: usize = 128;
const LOW_LEVEL_PROJ: usize = 32;
const DECODER: usize = 64;

#[derive(Debug, Clone)]
struct InvertedResidual {
    expand: Option<Conv2d>,
    dw: Conv2d,
    project: Conv2d,
    residual: bool,
}

impl InvertedResidual {
    fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, stride: usize, t: usize) -> Self {
        let hidden = cin * t;
        let expand = (t != 1).then(|| b.conv(&format!("{name}.expand"), cin, hidden, 1, 1, 1));
        let dw = b.depthwise(&format!("{name}.dw"), hidden, stride);
        let project = b.conv(&format!("{name}.project"), hidden, cout, 1, 1, 1);
        Self { expand, dw, project, residual: stride == 1 && cin == cout }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        let mut h = x;
        if let Some(e) = &self.expand {
            h = g.conv(h, e);
            h = g.relu6(h);
        }
        h = g.conv(h, &self.dw);
        h = g.relu6(h);
        h = g.conv(h, &self.project);
        if self.residual {
            h = g.add(h, x);
        }
        h
    }
}

#[derive(Debug, Clone)]
pub(crate) struct DeepLab {
    stem: Conv2d,
    stages: Vec<Vec<InvertedResidual>>,
    aspp_branches: Vec<Conv2d>,
    aspp_pool: Conv2d,
    aspp_project: Conv2d,
    low_proj: Conv2d,
    decoder: Conv2d,
    pub(crate) head: Conv2d,
}

impl DeepLab {
    pub(crate) fn build<T: Scalar>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Self {
        let stem_ch = cfg.channels(STEM);
        let stem = b.conv("stem", cfg.in_channels, stem_ch, 3, 2, 1);
        let mut cin = stem_ch;
        let mut stages = Vec::new();
        let mut low_ch = 0;
        for (si, &(base, stride, repeats, t)) in STAGES.iter().enumerate() {
            let cout = cfg.channels(base);
            let blocks = (0..repeats)
                .map(|r| {
                    let blk = InvertedResidual::build(
                        b,
                        &format!("encoder.stage{si}.block{r}"),
                        cin,
                        cout,
                        if r == 0 { stride } else { 1 },
                        t,
                    );
                    cin = cout;
                    blk
                })
                .collect();
            stages.push(blocks);
            if si == LOW_LEVEL_STAGE {
                low_ch = cout;
            }
        }

        let a = cfg.channels(ASPP);
        let mut aspp_branches = vec![b.conv("aspp.branch0", cin, a, 1, 1, 1)];
        for (i, &rate) in cfg.aspp_rates.iter().enumerate() {
            aspp_branches.push(b.conv(&format!("aspp.branch{}", i + 1), cin, a, 3, 1, rate));
        }
        b.marker("aspp.image_pool", "global_avg_pool", cin);
        let aspp_pool = b.conv("aspp.image_pool.proj", cin, a, 1, 1, 1);
        let aspp_project = b.conv("aspp.project", a * (aspp_branches.len() + 1), a, 1, 1, 1);

        let lp = cfg.channels(LOW_LEVEL_PROJ);
        let low_proj = b.conv("decoder.low_level", low_ch, lp, 1, 1, 1);
        let dch = cfg.channels(DECODER);
        let decoder = b.conv("decoder.fuse", a + lp, dch, 3, 1, 1);
        let head = b.conv("head", dch, cfg.num_classes, 1, 1, 1);
        Self { stem, stages, aspp_branches, aspp_pool, aspp_project, low_proj, decoder, head }
    }

    pub(crate) fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        let mut h = g.conv(x, &self.stem);
        h = g.relu6(h);
        let mut low = h;
        for (si, stage) in self.stages.iter().enumerate() {
            for blk in stage {
                h = blk.forward(g, h);
            }
            if si == LOW_LEVEL_STAGE {
                low = h;
            }
        }

        let (_, _, fh, fw) = g.value(h).dim();
        let mut branches: Vec<NodeId> = self
            .aspp_branches
            .iter()
            .map(|c| {
                let y = g.conv(h, c);
                g.relu(y)
            })
            .collect();
        let pooled = g.global_avg_pool(h);
        let pooled = g.conv(pooled, &self.aspp_pool);
        let pooled = g.relu(pooled);
        branches.push(g.broadcast(pooled, fh, fw));
        let cat = g.concat(&branches);
        let a = g.conv(cat, &self.aspp_project);
        let a = g.relu(a);

        let up = g.upsample(a, 4);
        let l = g.conv(low, &self.low_proj);
        let l = g.relu(l);
        let cat = g.concat(&[up, l]);
        let d = g.conv(cat, &self.decoder);
        let d = g.relu(d);
        let logits = g.conv(d, &self.head);
        g.upsample(logits, 4)
    }
}
