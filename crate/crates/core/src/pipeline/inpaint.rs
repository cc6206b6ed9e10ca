use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use super::BlendConfig;
use crate::error::Result;
use crate::image::Image;
use crate::mask_ops::{fallback_inpaint, BinaryMask};

/// Fills `hole` with the configured external inpainter, falling back to the
/// harmonic fill on any failure (spawn error, non-zero exit, timeout,
/// unreadable or mis-sized output). Returns the image and which path ran.
pub fn inpaint_background(
    image: &Image,
    hole: &BinaryMask,
    cfg: &BlendConfig,
    work_dir: Option<&Path>,
) -> Result<(Image, &'static str)> {
    if let (Some(cmd), Some(dir)) = (&cfg.inpaint_command, work_dir) {
        if let Some(out) = run_external(image, hole, cmd, dir, Duration::from_secs(cfg.inpaint_timeout_secs)) {
            // pixels outside the hole stay the identity's own
            let mut merged = image.clone();
            for c in 0..image.channels() {
                let (dst, src) = (merged.plane_mut(c), out.plane(c));
                for (i, &m) in hole.as_slice().iter().enumerate() {
                    if m {
                        dst[i] = src[i];
                    }
                }
            }
            return Ok((merged, "external"));
        }
    }
    Ok((fallback_inpaint(image, hole)?, "fallback"))
}

fn run_external(image: &Image, hole: &BinaryMask, cmd: &[String], dir: &Path, timeout: Duration) -> Option<Image> {
    let scratch = dir.join("inpaint");
    std::fs::create_dir_all(&scratch).ok()?;
    let (input, mask, output) = (scratch.join("input.png"), scratch.join("mask.png"), scratch.join("output.png"));
    image.save_png(&input).ok()?;
    hole.save_png(&mask).ok()?;
    let _ = std::fs::remove_file(&output);
    let args: Vec<String> = cmd
        .iter()
        .map(|a| {
            a.replace("{input}", &input.to_string_lossy())
                .replace("{mask}", &mask.to_string_lossy())
                .replace("{output}", &output.to_string_lossy())
        })
        .collect();
    let mut child = Command::new(&args[0])
        .args(&args[1..])
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .ok()?;
    let start = Instant::now();
    let status = loop {
        match child.try_wait() {
            Ok(Some(s)) => break s,
            Ok(None) if start.elapsed() < timeout => std::thread::sleep(Duration::from_millis(20)),
            _ => {
                let _ = child.kill();
                let _ = child.wait();
                return None;
            }
        }
    };
    if !status.success() {
        return None;
    }
    let out = Image::load_png(&output).ok()?;
    image.same_shape(&out).then_some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> (Image, BinaryMask) {
        (
            Image::from_fn(3, 12, 12, |c, y, x| (c + y + x) as f64 / 30.0),
            BinaryMask::rect(12, 12, 3, 3, 8, 8),
        )
    }

    #[test]
    fn unconfigured_uses_fallback() {
        let (img, hole) = scene();
        let (out, which) = inpaint_background(&img, &hole, &BlendConfig::default(), None).unwrap();
        assert_eq!(which, "fallback");
        assert_eq!(out, fallback_inpaint(&img, &hole).unwrap());
    }

    #[cfg(unix)]
    #[test]
    fn external_command_is_used_and_failures_fall_back() {
        let dir = tempfile::tempdir().unwrap();
        let (img, hole) = scene();
        let copy = BlendConfig {
            inpaint_command: Some(vec!["cp".into(), "{input}".into(), "{output}".into()]),
            ..BlendConfig::default()
        };
        let (out, which) = inpaint_background(&img, &hole, &copy, Some(dir.path())).unwrap();
        assert_eq!(which, "external");
        // the round trip through 8-bit PNG quantises the hole only
        for (i, &m) in hole.as_slice().iter().enumerate() {
            if !m {
                assert_eq!(out.plane(0)[i], img.plane(0)[i]);
            }
        }
        let failing = BlendConfig {
            inpaint_command: Some(vec!["false".into()]),
            ..BlendConfig::default()
        };
        assert_eq!(inpaint_background(&img, &hole, &failing, Some(dir.path())).unwrap().1, "fallback");
        let slow = BlendConfig {
            inpaint_command: Some(vec!["sleep".into(), "5".into()]),
            inpaint_timeout_secs: 0,
            ..BlendConfig::default()
        };
        assert_eq!(inpaint_background(&img, &hole, &slow, Some(dir.path())).unwrap().1, "fallback");
    }
}
