use serde::Serialize;

use super::{check_input_size, INPUT_CHANNELS, WIDTHS};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerFlops {
    pub name: &'static str,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopsReport {
    pub height: usize,
    pub width: usize,
    pub layers: Vec<LayerFlops>,
}

impl FlopsReport {
    pub fn total(&self) -> u64 {
        self.layers.iter().map(|l| l.flops).sum()
    }

    pub fn mflops(&self) -> f64 {
        self.total() as f64 / 1e6
    }
}

/// Per-layer operation counts for one forward pass: `2·Cout·Cin·K²·Hout·Wout`
/// per conv, `2·in·out` for the head, one op per output element for
/// activations and pooling.
pub fn flops_estimate(height: usize, width: usize) -> Result<FlopsReport> {
    check_input_size(height, width)?;
    let mut layers = Vec::new();
    let (mut h, mut w) = (height as u64, width as u64);
    let mut cin = INPUT_CHANNELS as u64;
    for (i, &cout) in WIDTHS.iter().enumerate() {
        let cout = cout as u64;
        let names = [
            ["conv1", "relu1", "pool1"],
            ["conv2", "relu2", "pool2"],
            ["conv3", "relu3", "gap"],
        ][i];
        layers.push(LayerFlops {
            name: names[0],
            flops: 2 * cout * cin * 9 * h * w,
        });
        layers.push(LayerFlops {
            name: names[1],
            flops: cout * h * w,
        });
        if i < 2 {
            h /= 2;
            w /= 2;
            layers.push(LayerFlops {
                name: names[2],
                flops: cout * h * w,
            });
        } else {
            layers.push(LayerFlops {
                name: names[2],
                flops: cout,
            });
        }
        cin = cout;
    }
    layers.push(LayerFlops {
        name: "head",
        flops: 2 * cin,
    });
    Ok(FlopsReport {
        height,
        width,
        layers,
    })
}
