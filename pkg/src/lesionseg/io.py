"""Dataset readers/writers: raw-binary phantom sets with JSON sidecars, and NIfTI.

Layouts
-------
raw:    <dir>/<id>.json + <id>_image.raw (<f4, [M,D,H,W]) + <id>_mask.raw (u1, [K,D,H,W])
nifti:  <dir>/<id>/<MODALITY>.nii[.gz] for each modality, optional <dir>/<id>/mask.nii[.gz]
masks:  <dir>/<id>.nii[.gz] (predictions), label-encoded for the tumour classes
"""
import json
import os
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core_types import TUMOR_CLASSES, DataError, Mask, Volume

RAW_FORMAT = "lesionseg-raw"
RAW_VERSION = 1
NIFTI_EXT = (".nii.gz", ".nii")


def save_raw_case(volume: Volume, mask: Optional[Mask], out_dir, seed=None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sid = volume.subject_id
    image_file = f"{sid}_image.raw"
    volume.data.astype("<f4").tofile(out_dir / image_file)
    header = {
        "format": RAW_FORMAT, "version": RAW_VERSION, "subject_id": sid,
        "image": {"file": image_file, "shape": list(volume.data.shape), "dtype": "<f4"},
        "spacing": list(volume.spacing), "modality_names": list(volume.modality_names),
        "seed": seed,
    }
    if mask is not None:
        mask_file = f"{sid}_mask.raw"
        mask.data.astype("u1").tofile(out_dir / mask_file)
        header["mask"] = {"file": mask_file, "shape": list(mask.data.shape), "dtype": "u1"}
        header["class_names"] = list(mask.class_names)
    path = out_dir / f"{sid}.json"
    path.write_text(json.dumps(header, indent=2, sort_keys=True))
    return path


def load_raw_case(path) -> Tuple[Volume, Optional[Mask]]:
    path = Path(path)
    header = json.loads(path.read_text())
    if header.get("format") != RAW_FORMAT:
        raise DataError(f"{path}: not a {RAW_FORMAT} sidecar")
    sid = header["subject_id"]

    def read(entry):
        f = path.parent / entry["file"]
        if not f.exists():
            raise DataError(f"subject {sid}: missing file {f.name}")
        arr = np.fromfile(f, dtype=entry["dtype"])
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape)):
            raise DataError(f"subject {sid}: {f.name} has {arr.size} values, expected {shape}")
        return arr.reshape(shape)

    vol = Volume(read(header["image"]).astype(np.float32), header["spacing"],
                 header["modality_names"], sid)
    mask = None
    if "mask" in header:
        mask = Mask(read(header["mask"]), header["class_names"])
    return vol, mask


def _nifti_file(folder: Path, stem: str) -> Optional[Path]:
    for ext in NIFTI_EXT:
        p = folder / f"{stem}{ext}"
        if p.exists():
            return p
    return None


def read_nifti(path) -> Tuple[np.ndarray, Tuple[float, float, float], np.ndarray]:
    """Return (array [D,H,W], spacing (dz,dy,dx), affine) from an (x,y,z) NIfTI."""
    import nibabel as nib

    img = nib.load(str(path))
    arr = np.asarray(img.dataobj)
    if arr.ndim != 3:
        raise DataError(f"{path}: expected a 3-D image, got shape {arr.shape}")
    zooms = img.header.get_zooms()[:3]
    return arr.transpose(2, 1, 0), (float(zooms[2]), float(zooms[1]), float(zooms[0])), img.affine


def write_nifti(arr: np.ndarray, path, spacing=(1.0, 1.0, 1.0), affine=None):
    import nibabel as nib

    if affine is None:
        affine = np.diag([spacing[2], spacing[1], spacing[0], 1.0])
    img = nib.Nifti1Image(np.ascontiguousarray(arr.transpose(2, 1, 0)), affine)
    img.header.set_zooms((spacing[2], spacing[1], spacing[0]))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    nib.save(img, str(path))


def labels_to_mask(labels: np.ndarray, class_names: Sequence[str]) -> Mask:
    """Label map -> binary channels; tumour labels follow 1=NCR, 2=ED, 4=ET."""
    labels = np.asarray(labels)
    if list(class_names) == list(TUMOR_CLASSES):
        wt = labels > 0
        tc = np.isin(labels, (1, 3, 4))
        et = labels == 4
        return Mask(np.stack([wt, tc, et]).astype(np.uint8), class_names)
    return Mask((labels > 0)[None].astype(np.uint8), class_names)


def mask_to_labels(mask: Mask) -> np.ndarray:
    if mask.data.shape[0] == 1:
        return mask.data[0].astype(np.uint8)
    wt, tc, et = mask.data[:3].astype(bool)
    labels = np.zeros(wt.shape, dtype=np.uint8)
    labels[wt] = 2
    labels[tc] = 1
    labels[et] = 4
    return labels


def load_nifti_case(folder, modalities: Sequence[str], class_names=("lesion",)):
    folder = Path(folder)
    sid = folder.name
    arrays, spacing, affine = [], None, None
    for m in modalities:
        f = _nifti_file(folder, m)
        if f is None:
            raise DataError(f"subject {sid}: missing modality file {m}.nii[.gz]")
        arr, sp, aff = read_nifti(f)
        if arrays and arr.shape != arrays[0].shape:
            raise DataError(f"subject {sid}: modality {m} shape {arr.shape} differs")
        arrays.append(arr.astype(np.float32))
        spacing, affine = spacing or sp, affine if affine is not None else aff
    vol = Volume(np.stack(arrays), spacing, list(modalities), sid, affine=affine)
    mf = _nifti_file(folder, "mask")
    mask = labels_to_mask(read_nifti(mf)[0], class_names) if mf else None
    return vol, mask


def load_dataset(path, modalities: Optional[Sequence[str]] = None,
                 class_names=("lesion",)) -> List[Tuple[Volume, Optional[Mask]]]:
    """Load every case under ``path`` (raw sidecars or NIfTI subject folders), sorted by id."""
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"data directory {path} does not exist")
    sidecars = sorted(path.glob("*.json"))
    cases = []
    if sidecars:
        for sc in sidecars:
            try:
                header = json.loads(sc.read_text())
            except json.JSONDecodeError:
                continue
            if header.get("format") == RAW_FORMAT:
                cases.append(load_raw_case(sc))
    else:
        if modalities is None:
            raise DataError("modalities are required to read NIfTI subject folders")
        for sub in sorted(p for p in path.iterdir() if p.is_dir()):
            cases.append(load_nifti_case(sub, modalities, class_names))
    if not cases:
        raise DataError(f"no cases found in {path}")
    if modalities is not None:
        for vol, _ in cases:
            missing = [m for m in modalities if m not in vol.modality_names]
            if missing:
                raise DataError(f"subject {vol.subject_id}: missing modality {missing[0]}")
        cases = [(_select(vol, modalities), msk) for vol, msk in cases]
    return sorted(cases, key=lambda c: c[0].subject_id)


def _select(vol: Volume, modalities):
    if list(vol.modality_names) == list(modalities):
        return vol
    idx = [vol.modality_names.index(m) for m in modalities]
    return Volume(vol.data[idx], vol.spacing, list(modalities), vol.subject_id, vol.affine)


def save_mask(mask: Mask, path, spacing, affine=None):
    write_nifti(mask_to_labels(mask), path, spacing, affine)


def load_masks(path, class_names=("lesion",)) -> Dict[str, Tuple[Mask, Tuple[float, ...]]]:
    """Masks keyed by subject id.

    Accepts a prediction folder (``<id>.nii[.gz]``), NIfTI subject folders holding
    ``mask.nii[.gz]``, or a raw dataset folder.
    """
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"mask directory {path} does not exist")
    out = {}
    files = sorted(p for p in path.iterdir() if p.name.endswith(NIFTI_EXT))
    if files:
        for f in files:
            sid = f.name[:-7] if f.name.endswith(".nii.gz") else f.name[:-4]
            arr, spacing, _ = read_nifti(f)
            out[sid] = (labels_to_mask(arr, class_names), spacing)
        return out
    subjects = sorted(p for p in path.iterdir() if p.is_dir() and _nifti_file(p, "mask"))
    if subjects:
        for sub in subjects:
            f = _nifti_file(sub, "mask")
            arr, spacing, _ = read_nifti(f)
            out[sub.name] = (labels_to_mask(arr, class_names), spacing)
        return out
    for vol, mask in load_dataset(path, class_names=class_names):
        if mask is None:
            raise DataError(f"subject {vol.subject_id}: no mask")
        out[vol.subject_id] = (mask, vol.spacing)
    return out


def list_subject_ids(path) -> List[str]:
    return sorted(os.path.splitext(p.name)[0] for p in Path(path).glob("*.json"))
