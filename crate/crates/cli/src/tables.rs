//! CSV tables. Floats use 17 significant digits so re-runs compare
//! byte for byte.

use std::io::{self, Write};

use symflow::embedding::EpochLosses;
use symflow::flow::{Complexity, LossRecord};
use symflow::signal::SignalKind;
use symflow::validation::{CrbWidths, InstanceLevels};

pub fn pretrain_losses<W: Write>(w: &mut W, hist: &[EpochLosses]) -> io::Result<()> {
    writeln!(w, "epoch,total,invariance,variance,covariance,lambda1,lambda2,lambda3")?;
    for e in hist {
        writeln!(
            w,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            e.epoch,
            e.total,
            e.invariance,
            e.variance,
            e.covariance,
            e.weights.lambda1,
            e.weights.lambda2,
            e.weights.lambda3
        )?;
    }
    Ok(())
}

pub fn flow_losses<W: Write>(w: &mut W, initial_val: f64, hist: &[LossRecord]) -> io::Result<()> {
    writeln!(w, "epoch,train,val")?;
    writeln!(w, "init,,{initial_val:.16e}")?;
    for r in hist {
        writeln!(w, "{},{:.16e},{:.16e}", r.epoch, r.train, r.val)?;
    }
    Ok(())
}

pub fn samples<W: Write>(w: &mut W, kind: SignalKind, samples: &[[f64; 2]]) -> io::Result<()> {
    let [a, b] = kind.param_names();
    writeln!(w, "{a},{b}")?;
    for s in samples {
        writeln!(w, "{:.16e},{:.16e}", s[0], s[1])?;
    }
    Ok(())
}

pub fn levels<W: Write>(w: &mut W, kind: SignalKind, levels: &[InstanceLevels]) -> io::Result<()> {
    let [a, b] = kind.param_names();
    writeln!(w, "instance,joint,{a},{b}")?;
    for (i, l) in levels.iter().enumerate() {
        writeln!(w, "{i},{:.16e},{:.16e},{:.16e}", l.joint, l.marginal[0], l.marginal[1])?;
    }
    Ok(())
}

pub fn crb<W: Write>(w: &mut W, theta: [f64; 2], c: &CrbWidths) -> io::Result<()> {
    writeln!(w, "param,value,crb_width")?;
    for (k, name) in c.kind.param_names().iter().enumerate() {
        writeln!(w, "{name},{:.16e},{:.16e}", theta[k], c.widths[k])?;
    }
    Ok(())
}

pub fn complexity<W: Write>(w: &mut W, rows: &[(String, Complexity)]) -> io::Result<()> {
    writeln!(w, "model,trainable_params,total_params,batch_size,macs")?;
    for (name, c) in rows {
        writeln!(
            w,
            "{name},{},{},{},{}",
            c.trainable_params, c.total_params, c.batch_size, c.macs_per_forward
        )?;
    }
    Ok(())
}
