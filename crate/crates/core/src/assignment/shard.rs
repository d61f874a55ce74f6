use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HNET";
const VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 + 4 + 8;

/// One training pair: an `n x n` distance block rounded to `f32` and its
/// binary association.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardRecord {
    pub distances: Vec<f32>,
    pub assoc: Vec<u8>,
}

/// Streams records to disk, patching the record count on `finish`.
pub struct ShardWriter {
    out: BufWriter<File>,
    n: usize,
    count: u64,
}

impl ShardWriter {
    pub fn create(path: &Path, n: usize) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(n as u32).to_le_bytes())?;
        out.write_all(&0u64.to_le_bytes())?;
        Ok(Self { out, n, count: 0 })
    }

    pub fn push(&mut self, record: &ShardRecord) -> Result<()> {
        let cells = self.n * self.n;
        if record.distances.len() != cells || record.assoc.len() != cells {
            return Err(Error::Data(format!("record does not hold {cells} cells")));
        }
        for v in &record.distances {
            self.out.write_all(&v.to_le_bytes())?;
        }
        self.out.write_all(&record.assoc)?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<u64> {
        self.out.flush()?;
        let mut file = self.out.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        file.seek(SeekFrom::Start(HEADER_LEN - 8))?;
        file.write_all(&self.count.to_le_bytes())?;
        file.sync_all()?;
        Ok(self.count)
    }
}

/// Reads a whole shard, returning `n` and its records.
pub fn read_shard(path: &Path) -> Result<(usize, Vec<ShardRecord>)> {
    let file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut r = BufReader::new(file);
    let mut header = [0u8; HEADER_LEN as usize];
    r.read_exact(&mut header).map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    if &header[..4] != MAGIC {
        return Err(Error::Format(format!("{}: not an association shard", path.display())));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("{}: unsupported shard version {version}", path.display())));
    }
    let n = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(header[12..20].try_into().unwrap());
    let cells = n * n;
    let record_len = (cells * 5) as u64;
    if n == 0 || HEADER_LEN + count * record_len != file_len {
        return Err(Error::Format(format!(
            "{}: header announces {count} records of size {n}x{n} but the file holds {file_len} bytes",
            path.display()
        )));
    }
    let mut records = Vec::with_capacity(count as usize);
    let mut dbuf = vec![0u8; cells * 4];
    for _ in 0..count {
        r.read_exact(&mut dbuf)?;
        let distances = dbuf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let mut assoc = vec![0u8; cells];
        r.read_exact(&mut assoc)?;
        if assoc.iter().any(|&v| v > 1) {
            return Err(Error::Format(format!("{}: association entry is not binary", path.display())));
        }
        records.push(ShardRecord { distances, assoc });
    }
    Ok((n, records))
}
