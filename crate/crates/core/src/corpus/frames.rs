use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use image::RgbImage;
use thiserror::Error;

use super::VideoAsset;

#[derive(Debug, Error)]
#[error("frames for video {video_id:?} unavailable: {message}")]
pub struct FrameSourceError {
    pub video_id: String,
    pub message: String,
}

impl FrameSourceError {
    fn new(video_id: &str, message: impl Into<String>) -> Self {
        Self {
            video_id: video_id.to_string(),
            message: message.into(),
        }
    }
}

/// Decoded frames of one video, in presentation order. Never empty; all
/// frames share one size.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    video_id: String,
    frames: Vec<RgbImage>,
}

impl FrameSequence {
    pub fn new(video_id: impl Into<String>, frames: Vec<RgbImage>) -> Result<Self, FrameSourceError> {
        let video_id = video_id.into();
        let Some(first) = frames.first() else {
            return Err(FrameSourceError::new(&video_id, "no frames"));
        };
        let dims = first.dimensions();
        if dims.0 == 0 || dims.1 == 0 {
            return Err(FrameSourceError::new(&video_id, "zero-sized frame"));
        }
        if let Some(i) = frames.iter().position(|f| f.dimensions() != dims) {
            return Err(FrameSourceError::new(
                &video_id,
                format!("frame {i} is {:?}, expected {dims:?}", frames[i].dimensions()),
            ));
        }
        Ok(Self { video_id, frames })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn frames(&self) -> &[RgbImage] {
        &self.frames
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.frames[0].dimensions()
    }
}

/// Parsed form of [`VideoAsset::frame_source_ref`].
///
/// `cmd:prog arg1 arg2 ...` runs an external decoder. Arguments are split on
/// whitespace; the literal `{out}` is replaced with a scratch directory the
/// decoder must write image files into (appended as the final argument when
/// absent). Anything else is a directory of image files, resolved against
/// the loader's base directory when relative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameSource {
    Directory(PathBuf),
    Command { program: String, args: Vec<String> },
}

impl FrameSource {
    pub fn parse(locator: &str) -> Option<Self> {
        if let Some(rest) = locator.strip_prefix("cmd:") {
            let mut parts = rest.split_whitespace().map(str::to_string);
            let program = parts.next()?;
            return Some(FrameSource::Command {
                program,
                args: parts.collect(),
            });
        }
        if locator.trim().is_empty() {
            return None;
        }
        Some(FrameSource::Directory(PathBuf::from(locator)))
    }
}

/// Resolves an asset to its frames.
pub trait FrameLoader: Sync {
    fn load(&self, asset: &VideoAsset) -> Result<FrameSequence, FrameSourceError>;
}

/// Loads frames from image directories or decoder commands.
#[derive(Debug, Clone, Default)]
pub struct FsFrameLoader {
    base_dir: PathBuf,
}

impl FsFrameLoader {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            base_dir: base_dir.into(),
        }
    }

    fn read_dir(&self, id: &str, dir: &Path) -> Result<FrameSequence, FrameSourceError> {
        let entries = std::fs::read_dir(dir)
            .map_err(|e| FrameSourceError::new(id, format!("{}: {e}", dir.display())))?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .and_then(|x| x.to_str())
                        .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        files.sort();
        let mut frames = Vec::with_capacity(files.len());
        for f in &files {
            let img = image::open(f).map_err(|e| FrameSourceError::new(id, format!("{}: {e}", f.display())))?;
            frames.push(img.to_rgb8());
        }
        FrameSequence::new(id, frames)
    }

    fn run_decoder(&self, id: &str, program: &str, args: &[String]) -> Result<FrameSequence, FrameSourceError> {
        let scratch = tempfile::tempdir().map_err(|e| FrameSourceError::new(id, format!("scratch dir: {e}")))?;
        let out = scratch.path().to_string_lossy().into_owned();
        let mut argv: Vec<String> = args.iter().map(|a| a.replace("{out}", &out)).collect();
        if !args.iter().any(|a| a.contains("{out}")) {
            argv.push(out.clone());
        }
        let status = Command::new(program)
            .args(&argv)
            .current_dir(if self.base_dir.as_os_str().is_empty() { Path::new(".") } else { &self.base_dir })
            .output()
            .map_err(|e| FrameSourceError::new(id, format!("spawn {program}: {e}")))?;
        if !status.status.success() {
            return Err(FrameSourceError::new(
                id,
                format!(
                    "decoder exited with {}: {}",
                    status.status,
                    String::from_utf8_lossy(&status.stderr).trim()
                ),
            ));
        }
        self.read_dir(id, scratch.path())
    }
}

impl FrameLoader for FsFrameLoader {
    fn load(&self, asset: &VideoAsset) -> Result<FrameSequence, FrameSourceError> {
        match FrameSource::parse(&asset.frame_source_ref) {
            None => Err(FrameSourceError::new(&asset.id, "empty frame locator")),
            Some(FrameSource::Directory(dir)) => {
                let dir = if dir.is_relative() { self.base_dir.join(dir) } else { dir };
                self.read_dir(&asset.id, &dir)
            }
            Some(FrameSource::Command { program, args }) => self.run_decoder(&asset.id, &program, &args),
        }
    }
}

/// In-memory loader keyed by video id; used by simulations and tests.
#[derive(Debug, Clone, Default)]
pub struct MemoryFrameLoader {
    videos: HashMap<String, FrameSequence>,
}

impl MemoryFrameLoader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, seq: FrameSequence) {
        self.videos.insert(seq.video_id().to_string(), seq);
    }
}

impl FrameLoader for MemoryFrameLoader {
    fn load(&self, asset: &VideoAsset) -> Result<FrameSequence, FrameSourceError> {
        self.videos
            .get(&asset.id)
            .cloned()
            .ok_or_else(|| FrameSourceError::new(&asset.id, "not in memory store"))
    }
}

pub fn load_frames(asset: &VideoAsset, loader: &dyn FrameLoader) -> Result<FrameSequence, FrameSourceError> {
    loader.load(asset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn asset(id: &str, frames: &str) -> VideoAsset {
        VideoAsset {
            id: id.into(),
            uploader_id: "u".into(),
            posted_at: 0,
            duration: 5.0,
            caption: String::new(),
            frame_source_ref: frames.into(),
        }
    }

    fn write_frames(dir: &Path, n: usize) {
        for i in 0..n {
            let img = RgbImage::from_pixel(16, 12, Rgb([i as u8 * 7, 10, 200]));
            img.save(dir.join(format!("{i:04}.png"))).unwrap();
        }
    }

    #[test]
    fn parse_locators() {
        assert_eq!(
            FrameSource::parse("cmd:ffmpeg -i a.mp4 {out}/%03d.png"),
            Some(FrameSource::Command {
                program: "ffmpeg".into(),
                args: vec!["-i".into(), "a.mp4".into(), "{out}/%03d.png".into()]
            })
        );
        assert_eq!(FrameSource::parse("frames/v1"), Some(FrameSource::Directory("frames/v1".into())));
        assert_eq!(FrameSource::parse("cmd:"), None);
        assert_eq!(FrameSource::parse(""), None);
    }

    #[test]
    fn directory_with_thirty_frames() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("v1");
        std::fs::create_dir(&dir).unwrap();
        write_frames(&dir, 30);
        std::fs::write(dir.join("notes.txt"), "ignored").unwrap();
        let loader = FsFrameLoader::new(tmp.path());
        let seq = loader.load(&asset("v1", "v1")).unwrap();
        assert_eq!(seq.frame_count(), 30);
        assert_eq!(seq.frames()[3].get_pixel(0, 0), &Rgb([21, 10, 200]));
        // deterministic
        assert_eq!(seq, loader.load(&asset("v1", "v1")).unwrap());
    }

    #[test]
    fn empty_or_missing_directory_is_error() {
        let tmp = tempfile::tempdir().unwrap();
        let loader = FsFrameLoader::new(tmp.path());
        let err = loader.load(&asset("v9", ".")).unwrap_err();
        assert_eq!(err.video_id, "v9");
        assert!(loader.load(&asset("v9", "missing")).is_err());
    }

    #[test]
    fn decoder_command_writes_frames() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("src");
        std::fs::create_dir(&src).unwrap();
        write_frames(&src, 5);
        let script = tmp.path().join("decode.sh");
        std::fs::write(&script, format!("#!/bin/sh\ncp {}/*.png \"$1\"\n", src.display())).unwrap();
        let loader = FsFrameLoader::new(tmp.path());
        let seq = loader
            .load(&asset("v2", &format!("cmd:sh {} {{out}}", script.display())))
            .unwrap();
        assert_eq!(seq.frame_count(), 5);

        let failing = loader.load(&asset("v3", "cmd:false")).unwrap_err();
        assert_eq!(failing.video_id, "v3");
    }

    #[test]
    fn mismatched_dimensions_rejected() {
        let a = RgbImage::new(4, 4);
        let b = RgbImage::new(4, 5);
        assert!(FrameSequence::new("x", vec![a, b]).is_err());
        assert!(FrameSequence::new("x", vec![]).is_err());
    }
}
