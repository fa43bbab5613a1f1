use std::io::Read;
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::image::Image;

use super::RewardSpec;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Wraps an external scorer process.
///
/// `command` is split on whitespace into program and leading arguments; the
/// scorer is then invoked with `<image.png> <prompt>` appended and must print
/// one decimal number and exit 0. Only the first whitespace-separated token of
/// stdout is read.
pub fn external_score(command: &str, timeout: Duration) -> Result<RewardSpec> {
    let argv: Vec<String> = command.split_whitespace().map(str::to_string).collect();
    if argv.is_empty() {
        return Err(Error::invalid("empty external scorer command"));
    }
    let name = format!("external:{command}");
    let label = name.clone();
    Ok(RewardSpec::new(
        &name,
        (f64::NEG_INFINITY, f64::INFINITY),
        Arc::new(move |img: &Image, prompt: &str| run_scorer(&label, &argv, img, prompt, timeout)),
    ))
}

fn run_scorer(name: &str, argv: &[String], img: &Image, prompt: &str, timeout: Duration) -> Result<f64> {
    let fail = |why: String| Error::reward(name, why);
    let file = tempfile::Builder::new()
        .prefix("texforce-score-")
        .suffix(".png")
        .tempfile()?;
    img.save_png(file.path())?;
    let mut child = Command::new(&argv[0])
        .args(&argv[1..])
        .arg(file.path())
        .arg(prompt)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| fail(format!("spawn {}: {e}", argv[0])))?;
    let mut stdout = child.stdout.take().expect("piped stdout");
    let reader = thread::spawn(move || {
        let mut s = String::new();
        stdout.read_to_string(&mut s).map(|_| s)
    });
    let start = Instant::now();
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if start.elapsed() >= timeout {
            let _ = child.kill();
            let _ = child.wait();
            return Err(fail(format!("timed out after {:.1}s", timeout.as_secs_f64())));
        }
        thread::sleep(Duration::from_millis(5));
    };
    let out = reader
        .join()
        .map_err(|_| fail("stdout reader panicked".into()))?
        .map_err(|e| fail(format!("reading stdout: {e}")))?;
    if !status.success() {
        return Err(fail(format!("exit status {status}")));
    }
    // the first token is the score; `echo 0.5` style constant scorers echo their argv after it
    let text = out.split_whitespace().next().unwrap_or("");
    let value: f64 = text.parse().map_err(|_| fail(format!("unparseable output {:?}", out.trim())))?;
    if !value.is_finite() {
        return Err(fail(format!("non-finite output {text:?}")));
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_scorer() {
        let spec = external_score("echo 0.5", DEFAULT_TIMEOUT).unwrap();
        assert!(!spec.differentiable);
        let img = Image::filled(4, 4, [0.1, 0.2, 0.3]);
        assert_eq!(spec.evaluate(&img, "a red circle").unwrap(), 0.5);
        assert_eq!(spec.evaluate(&Image::filled(4, 4, [0.9; 3]), "x").unwrap(), 0.5);
    }

    #[test]
    fn timeout_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("slow.sh");
        std::fs::write(&script, "#!/bin/sh\nsleep 5\necho 1.0\n").unwrap();
        let spec = external_score(&format!("sh {}", script.display()), Duration::from_millis(200)).unwrap();
        let err = spec.evaluate(&Image::filled(2, 2, [0.5; 3]), "p").unwrap_err();
        assert!(err.to_string().contains("timed out"), "{err}");
    }

    #[test]
    fn failure_modes() {
        let img = Image::filled(2, 2, [0.5; 3]);
        assert!(external_score("false", DEFAULT_TIMEOUT).unwrap().evaluate(&img, "p").is_err());
        assert!(external_score("echo nope", DEFAULT_TIMEOUT).unwrap().evaluate(&img, "p").is_err());
        assert!(external_score("/nonexistent/scorer", DEFAULT_TIMEOUT).unwrap().evaluate(&img, "p").is_err());
        assert!(external_score("   ", DEFAULT_TIMEOUT).is_err());
    }
}
