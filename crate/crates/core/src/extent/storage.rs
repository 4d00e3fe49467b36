use std::fs::{File, OpenOptions};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::Path;

/// Backing bytes of one extent.
#[derive(Debug)]
pub(crate) enum Storage {
    Memory(Vec<u8>),
    File { file: File, len: u64 },
}

impl Storage {
    pub(crate) fn create_file(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().read(true).write(true).create(true).truncate(true).open(path)?;
        Ok(Storage::File { file, len: 0 })
    }

    pub(crate) fn open_file(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let len = file.metadata()?.len();
        Ok(Storage::File { file, len })
    }

    pub(crate) fn len(&self) -> u64 {
        match self {
            Storage::Memory(v) => v.len() as u64,
            Storage::File { len, .. } => *len,
        }
    }

    pub(crate) fn read_at(&self, offset: u64, buf: &mut [u8]) -> io::Result<()> {
        match self {
            Storage::Memory(v) => {
                let o = offset as usize;
                buf.copy_from_slice(&v[o..o + buf.len()]);
                Ok(())
            }
            Storage::File { file, .. } => file.read_exact_at(buf, offset),
        }
    }

    pub(crate) fn write_at(&mut self, offset: u64, data: &[u8]) -> io::Result<()> {
        let end = offset + data.len() as u64;
        match self {
            Storage::Memory(v) => {
                let o = offset as usize;
                if v.len() < end as usize {
                    v.resize(end as usize, 0);
                }
                v[o..o + data.len()].copy_from_slice(data);
            }
            Storage::File { file, len } => {
                file.write_all_at(data, offset)?;
                *len = (*len).max(end);
            }
        }
        Ok(())
    }

    pub(crate) fn set_len(&mut self, n: u64) -> io::Result<()> {
        match self {
            Storage::Memory(v) => v.resize(n as usize, 0),
            Storage::File { file, len } => {
                file.set_len(n)?;
                *len = n;
            }
        }
        Ok(())
    }

    pub(crate) fn zero(&mut self, offset: u64, len: u64) -> io::Result<()> {
        match self {
            Storage::Memory(v) => {
                v[offset as usize..(offset + len) as usize].fill(0);
                Ok(())
            }
            Storage::File { .. } => {
                let zeros = vec![0u8; len.min(1 << 20) as usize];
                let mut done = 0;
                while done < len {
                    let n = (len - done).min(zeros.len() as u64);
                    self.write_at(offset + done, &zeros[..n as usize])?;
                    done += n;
                }
                Ok(())
            }
        }
    }

    pub(crate) fn sync(&self) -> io::Result<()> {
        match self {
            Storage::Memory(_) => Ok(()),
            Storage::File { file, .. } => file.sync_data(),
        }
    }
}
