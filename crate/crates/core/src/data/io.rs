//! Directory layout `root/ID/cond-seq/view/frame.png`.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{resize, FilterType};
use image::GrayImage;

use super::{Condition, DatasetIndex, SilhouetteSequence};
use crate::error::{Error, Result};

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

fn file_name(p: &Path) -> &str {
    p.file_name().and_then(|n| n.to_str()).unwrap_or("")
}

fn parse_cond_seq(name: &str) -> Option<(Condition, usize)> {
    let (c, s) = name.split_once('-')?;
    Some((c.parse().ok()?, s.parse().ok()?))
}

/// Decodes one frame, thresholds it at 128 and resizes it to `[h, w]` by
/// nearest neighbour.
pub fn read_frame(path: &Path, resolution: [usize; 2]) -> Result<Vec<u8>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let [h, w] = resolution;
    let img = if img.height() as usize != h || img.width() as usize != w {
        resize(&img, w as u32, h as u32, FilterType::Nearest)
    } else {
        img
    };
    Ok(img.pixels().map(|p| u8::from(p.0[0] >= 128)).collect())
}

/// Indexes every readable sequence under `root`. Unreadable frames are
/// skipped with a warning; sequences left empty are dropped.
pub fn load_dataset(root: &Path, resolution: [usize; 2], train_ids: usize) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let mut sequences = Vec::new();
    for id_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let Ok(id) = file_name(&id_dir).parse::<usize>() else {
            log::warn!("skipping non-numeric identity directory {}", id_dir.display());
            continue;
        };
        for cs_dir in sorted_entries(&id_dir)?.into_iter().filter(|p| p.is_dir()) {
            let Some((condition, seq)) = parse_cond_seq(file_name(&cs_dir)) else {
                log::warn!("skipping unrecognised sequence directory {}", cs_dir.display());
                continue;
            };
            for view_dir in sorted_entries(&cs_dir)?.into_iter().filter(|p| p.is_dir()) {
                let Ok(view) = file_name(&view_dir).parse::<u32>() else {
                    log::warn!("skipping unrecognised view directory {}", view_dir.display());
                    continue;
                };
                let mut frames = Vec::new();
                for f in sorted_entries(&view_dir)?.into_iter().filter(|p| p.is_file()) {
                    match read_frame(&f, resolution) {
                        Ok(px) => frames.push(px),
                        Err(e) => log::warn!("skipping frame: {e}"),
                    }
                }
                if frames.is_empty() {
                    log::warn!("dropping empty sequence {}", view_dir.display());
                    continue;
                }
                sequences.push(SilhouetteSequence {
                    id,
                    condition,
                    seq,
                    view,
                    height: resolution[0],
                    width: resolution[1],
                    frames,
                });
            }
        }
    }
    DatasetIndex::new(resolution, sequences, train_ids)
}

/// Writes every sequence as 8-bit PNG frames (0 or 255) under `root`.
pub fn export_dataset(index: &DatasetIndex, root: &Path) -> Result<()> {
    for s in &index.sequences {
        let dir = root
            .join(format!("{:03}", s.id))
            .join(format!("{}-{:02}", s.condition, s.seq))
            .join(format!("{:03}", s.view));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, f) in s.frames.iter().enumerate() {
            let px: Vec<u8> = f.iter().map(|&v| v * 255).collect();
            let img = GrayImage::from_raw(s.width as u32, s.height as u32, px)
                .ok_or_else(|| Error::Data("frame size mismatch".into()))?;
            let path = dir.join(format!("{i:03}.png"));
            img.save(&path).map_err(|source| Error::Image { path, source })?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cond_seq_names() {
        assert_eq!(parse_cond_seq("nm-01"), Some((Condition::Nm, 1)));
        assert_eq!(parse_cond_seq("BG-2"), Some((Condition::Bg, 2)));
        assert_eq!(parse_cond_seq("xx-01"), None);
        assert_eq!(parse_cond_seq("nm"), None);
    }

    #[test]
    fn empty_root_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path(), [8, 6], 1).unwrap_err();
        assert!(err.to_string().contains("no sequences found"));
    }

    #[test]
    fn frames_are_thresholded_and_resized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.png");
        let mut img = GrayImage::new(4, 4);
        for (x, y, px) in img.enumerate_pixels_mut() {
            px.0[0] = if x < 2 { 200 } else if y < 2 { 127 } else { 128 };
        }
        img.save(&p).unwrap();
        let f = read_frame(&p, [4, 4]).unwrap();
        assert_eq!(f, vec![1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1]);
        let small = read_frame(&p, [2, 2]).unwrap();
        assert_eq!(small.len(), 4);
        assert!(small.iter().all(|&v| v <= 1));
    }
}
