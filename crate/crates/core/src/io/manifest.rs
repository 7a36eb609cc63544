//! Dataset manifests: a tab-separated record list tying utterance ids,
//! intent names and split tags to rows of the two embedding files.
//!
//! ```text
//! #deter-manifest 1
//! #tsdae  <file>  <dim>
//! #use    <file>  <dim>
//! #label  <index> <name>      (optional; fixes label order)
//! <id>    <intent> <split> <row>
//! ```
//!
//! Fields are separated by a single tab. `split` is `train`, `val`, `test`
//! or `-`. The intent name `oos` marks out-of-scope rows. File paths are
//! resolved relative to the manifest's directory.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{format_err, invalid, Result};
use crate::io::embedding::{read_embeddings, write_embeddings};
use crate::types::{validate_dataset, DualDataset, IntentLabelMap, Split, OOS_NAME};

pub const MANIFEST_HEADER: &str = "#deter-manifest 1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub intent: String,
    pub split: Option<Split>,
    pub row: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub tsdae_file: PathBuf,
    pub use_file: PathBuf,
    pub d_tsdae: usize,
    pub d_use: usize,
    /// Explicit known-intent order; `None` means order of first appearance.
    pub labels: Option<Vec<String>>,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut offset = 0u64;
        let mut tsdae = None;
        let mut use_ = None;
        let mut labels: Vec<String> = Vec::new();
        let mut records = Vec::new();
        let mut seen_ids = HashSet::new();
        let mut saw_header = false;

        for line in text.split_inclusive('\n') {
            let at = offset;
            offset += line.len() as u64;
            let line = line.trim_end_matches(['\n', '\r']);
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !saw_header {
                if line != MANIFEST_HEADER {
                    return format_err(at, format!("expected {MANIFEST_HEADER:?}"));
                }
                saw_header = true;
                continue;
            }
            match fields[0] {
                "#tsdae" | "#use" => {
                    if fields.len() != 3 {
                        return format_err(at, "stream line needs <file> and <dim>");
                    }
                    let dim: usize = fields[2]
                        .parse()
                        .ok()
                        .filter(|&d| d > 0)
                        .map_or_else(|| format_err(at, "dimension must be a positive integer"), Ok)?;
                    let entry = Some((PathBuf::from(fields[1]), dim));
                    if fields[0] == "#tsdae" {
                        tsdae = entry;
                    } else {
                        use_ = entry;
                    }
                }
                "#label" => {
                    if fields.len() != 3 || fields[1].parse::<usize>().ok() != Some(labels.len()) {
                        return format_err(at, "label lines must be `#label <index> <name>` in order");
                    }
                    labels.push(fields[2].to_string());
                }
                f if f.starts_with('#') => {
                    return format_err(at, format!("unknown directive {f:?}"));
                }
                _ => {
                    if fields.len() != 4 {
                        return format_err(at, format!("record has {} fields, expected 4", fields.len()));
                    }
                    let split = match fields[2] {
                        "-" => None,
                        s => Some(Split::parse(s).map_or_else(
                            || format_err(at, format!("unknown split tag {s:?}")),
                            Ok,
                        )?),
                    };
                    let row = fields[3]
                        .parse()
                        .map_or_else(|_| format_err(at, "row index is not an integer"), Ok)?;
                    if fields[0].is_empty() || fields[1].is_empty() {
                        return format_err(at, "empty id or intent");
                    }
                    if !seen_ids.insert(fields[0].to_string()) {
                        return format_err(at, format!("duplicate id {:?}", fields[0]));
                    }
                    records.push(ManifestRecord {
                        id: fields[0].to_string(),
                        intent: fields[1].to_string(),
                        split,
                        row,
                    });
                }
            }
        }
        if !saw_header {
            return format_err(0, "empty manifest");
        }
        let Some((tsdae_file, d_tsdae)) = tsdae else {
            return format_err(offset, "missing #tsdae line");
        };
        let Some((use_file, d_use)) = use_ else {
            return format_err(offset, "missing #use line");
        };
        Ok(Self {
            tsdae_file,
            use_file,
            d_tsdae,
            d_use,
            labels: (!labels.is_empty()).then_some(labels),
            records,
        })
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MANIFEST_HEADER}");
        let _ = writeln!(s, "#tsdae\t{}\t{}", self.tsdae_file.display(), self.d_tsdae);
        let _ = writeln!(s, "#use\t{}\t{}", self.use_file.display(), self.d_use);
        for (i, l) in self.labels.iter().flatten().enumerate() {
            let _ = writeln!(s, "#label\t{i}\t{l}");
        }
        for r in &self.records {
            let split = r.split.map_or("-", Split::as_str);
            let _ = writeln!(s, "{}\t{}\t{}\t{}", r.id, r.intent, split, r.row);
        }
        s
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }

    pub fn label_map(&self) -> Result<IntentLabelMap> {
        match &self.labels {
            Some(l) => IntentLabelMap::new(l.clone()),
            None => {
                let mut names: Vec<String> = Vec::new();
                let mut seen = HashSet::new();
                for r in &self.records {
                    if r.intent != OOS_NAME && seen.insert(r.intent.as_str()) {
                        names.push(r.intent.clone());
                    }
                }
                IntentLabelMap::new(names)
            }
        }
    }
}

/// Loads the manifest at `path` and both embedding files it names,
/// returning a validated dataset in manifest record order.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<DualDataset> {
    let path = path.as_ref();
    let manifest = DatasetManifest::read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let tsdae = read_embeddings(base.join(&manifest.tsdae_file))?;
    let use_ = read_embeddings(base.join(&manifest.use_file))?;
    assemble(&manifest, tsdae, use_)
}

pub(crate) fn assemble(
    manifest: &DatasetManifest,
    tsdae: crate::types::EmbeddingMatrix,
    use_: crate::types::EmbeddingMatrix,
) -> Result<DualDataset> {
    if tsdae.dim() != manifest.d_tsdae || use_.dim() != manifest.d_use {
        return invalid(format!(
            "manifest declares dims {}/{}, files hold {}/{}",
            manifest.d_tsdae,
            manifest.d_use,
            tsdae.dim(),
            use_.dim()
        ));
    }
    if tsdae.count() != use_.count() {
        return invalid(format!(
            "embedding files hold {} and {} rows",
            tsdae.count(),
            use_.count()
        ));
    }
    let n = manifest.records.len();
    if n != tsdae.count() {
        return invalid(format!("manifest lists {n} records, files hold {} rows", tsdae.count()));
    }
    let mut seen = vec![false; n];
    for r in &manifest.records {
        if r.row >= n || std::mem::replace(&mut seen[r.row], true) {
            return invalid(format!(
                "record {}: row {} is out of range or repeated",
                r.id, r.row
            ));
        }
    }
    let label_map = manifest.label_map()?;
    let mut labels = Vec::with_capacity(n);
    for r in &manifest.records {
        match label_map.index_of(&r.intent) {
            Some(l) => labels.push(l),
            None => return invalid(format!("record {}: unknown intent {:?}", r.id, r.intent)),
        }
    }
    let tagged = manifest.records.iter().filter(|r| r.split.is_some()).count();
    let splits = if tagged == n && n > 0 {
        Some(manifest.records.iter().map(|r| r.split.unwrap()).collect())
    } else if tagged == 0 {
        None
    } else {
        return invalid("either every record or no record must carry a split tag");
    };
    let rows: Vec<usize> = manifest.records.iter().map(|r| r.row).collect();
    let ds = DualDataset {
        tsdae: tsdae.select(&rows),
        use_: use_.select(&rows),
        labels,
        ids: manifest.records.iter().map(|r| r.id.clone()).collect(),
        splits,
        label_map,
    };
    if let Some(v) = validate_dataset(&ds).first() {
        return invalid(v.to_string());
    }
    Ok(ds)
}

/// Writes `ds` as `tsdae.detb`, `use.detb` and `manifest.tsv` under `dir`,
/// keeping the label order explicit. Returns the manifest path.
pub fn save_dataset(ds: &DualDataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_embeddings(&ds.tsdae, dir.join("tsdae.detb"))?;
    write_embeddings(&ds.use_, dir.join("use.detb"))?;
    let mut records = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let intent = ds
            .label_map
            .name_of(ds.labels[i])
            .map_or_else(|| invalid(format!("label {} has no name", ds.labels[i])), Ok)?;
        records.push(ManifestRecord {
            id: ds.ids[i].clone(),
            intent: intent.to_string(),
            split: ds.splits.as_ref().map(|s| s[i]),
            row: i,
        });
    }
    let manifest = DatasetManifest {
        tsdae_file: "tsdae.detb".into(),
        use_file: "use.detb".into(),
        d_tsdae: ds.d_tsdae(),
        d_use: ds.d_use(),
        labels: Some(ds.label_map.names().to_vec()),
        records,
    };
    let path = dir.join("manifest.tsv");
    manifest.write(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::EmbeddingMatrix;
    use crate::Error;

    const TEXT: &str = "#deter-manifest 1\n#tsdae\tt.detb\t2\n#use\tu.detb\t1\n\
a\tbook_flight\ttrain\t1\nb\toos\ttest\t0\nc\tweather\tval\t2\n";

    #[test]
    fn parse_render_round_trip() {
        let m = DatasetManifest::parse(TEXT).unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.records[1].intent, "oos");
        assert_eq!(m.records[2].split, Some(Split::Val));
        assert_eq!(DatasetManifest::parse(&m.render()).unwrap(), m);
        assert_eq!(m.render(), TEXT);
    }

    #[test]
    fn assemble_reorders_rows() {
        let m = DatasetManifest::parse(TEXT).unwrap();
        let t = EmbeddingMatrix::new(2, vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5]).unwrap();
        let u = EmbeddingMatrix::new(1, vec![10.0, 11.0, 12.0]).unwrap();
        let ds = assemble(&m, t, u).unwrap();
        assert_eq!(ds.tsdae.row(0), &[1.0, 1.5]);
        assert_eq!(ds.use_.row(1), &[10.0]);
        assert_eq!(ds.labels, vec![0, 2, 1]);
        assert_eq!(ds.label_map.names(), &["book_flight".to_string(), "weather".to_string()]);
    }

    #[test]
    fn rejects_bad_rows() {
        let t = EmbeddingMatrix::new(2, vec![0.0; 6]).unwrap();
        let u = EmbeddingMatrix::new(1, vec![0.0; 3]).unwrap();
        let repeated = TEXT.replace("val\t2", "val\t1");
        let m = DatasetManifest::parse(&repeated).unwrap();
        assert!(assemble(&m, t.clone(), u.clone()).is_err());
        let wrong_dim = TEXT.replace("t.detb\t2", "t.detb\t3");
        let m = DatasetManifest::parse(&wrong_dim).unwrap();
        assert!(assemble(&m, t, u).is_err());
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        let dup = format!("{TEXT}a\tweather\ttest\t3\n");
        match DatasetManifest::parse(&dup) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset as usize, TEXT.len());
                assert!(message.contains("duplicate id"));
            }
            other => panic!("{other:?}"),
        }
        assert!(DatasetManifest::parse("nope\n").is_err());
        assert!(DatasetManifest::parse(&TEXT.replace("train", "dev")).is_err());
        assert!(DatasetManifest::parse(&TEXT.replace("#use\tu.detb\t1\n", "")).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::parse(TEXT).unwrap();
        let t = EmbeddingMatrix::new(2, vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5]).unwrap();
        let u = EmbeddingMatrix::new(1, vec![10.0, 11.0, 12.0]).unwrap();
        let ds = assemble(&m, t, u).unwrap();
        let path = save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(path).unwrap(), ds);
    }
}
