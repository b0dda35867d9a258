//! U-Net with four pooling levels (total stride 16).

use super::{Builder, ModelConfig};
use crate::nn::{Conv2d, Graph, NodeId};
use crate::Scalar;

const BASE: usize = 16;
const DEPTH: usize = 4;

#[derive(Debug, Clone)]
struct DoubleConv(Conv2d, Conv2d);

impl DoubleConv {
    fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize) -> Self {
        Self(b.conv(&format!("{name}.conv0"), cin, cout, 3, 1, 1), b.conv(&format!("{name}.conv1"), cout, cout, 3, 1, 1))
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        let h = g.conv(x, &self.0);
        let h = g.relu(h);
        let h = g.conv(h, &self.1);
        g.relu(h)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct UNet {
    down: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    up: Vec<DoubleConv>,
    pub(crate) head: Conv2d,
}

impl UNet {
    pub(crate) fn build<T: Scalar>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Self {
        let widths: Vec<usize> = (0..=DEPTH).map(|d| cfg.channels(BASE << d)).collect();
        let mut cin = cfg.in_channels;
        let mut down = Vec::new();
        for (d, &w) in widths[..DEPTH].iter().enumerate() {
            down.push(DoubleConv::build(b, &format!("encoder.level{d}"), cin, w));
            b.marker(&format!("encoder.level{d}.pool"), "max_pool", w);
            cin = w;
        }
        let bottleneck = DoubleConv::build(b, "bottleneck", cin, widths[DEPTH]);
        cin = widths[DEPTH];
        let mut up = Vec::new();
        for d in (0..DEPTH).rev() {
            b.marker(&format!("decoder.level{d}.upsample"), "bilinear_upsample", cin);
            up.push(DoubleConv::build(b, &format!("decoder.level{d}"), cin + widths[d], widths[d]));
            cin = widths[d];
        }
        let head = b.conv("head", cin, cfg.num_classes, 1, 1, 1);
        Self { down, bottleneck, up, head }
    }

    pub(crate) fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        let mut skips = Vec::with_capacity(DEPTH);
        let mut h = x;
        for blk in &self.down {
            h = blk.forward(g, h);
            skips.push(h);
            h = g.maxpool2(h);
        }
        h = self.bottleneck.forward(g, h);
        for blk in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let u = g.upsample(h, 2);
            let cat = g.concat(&[u, skip]);
            h = blk.forward(g, cat);
        }
        g.conv(h, &self.head)
    }
}
