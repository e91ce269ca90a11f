"""Label schemas for the three delineation tasks.

Tissue: 4 exclusive foreground classes. Tracts: 31 non-exclusive channels
(24 merged bilateral pairs + 7 corpus callosum subdivisions). Parcellation:
96 exclusive labels (47 bilateral structures as left/right + 2 midline
structures), ids assigned in table order starting at 1.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Label:
    id: int
    name: str
    abbreviation: str


@dataclass(frozen=True)
class LabelSchema:
    name: str
    labels: tuple[Label, ...]
    exclusive: bool

    def __post_init__(self):
        ids = [l.id for l in self.labels]
        if len(set(ids)) != len(ids):
            raise ValueError(f"schema {self.name}: duplicate label ids")
        if self.exclusive and 0 in ids:
            raise ValueError(f"schema {self.name}: id 0 is reserved for background")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def ids(self) -> list[int]:
        return [l.id for l in self.labels]

    def by_abbreviation(self, abbr: str) -> Label:
        for l in self.labels:
            if l.abbreviation == abbr:
                return l
        raise KeyError(abbr)


_TISSUES = [
    ("White matter", "WM"),
    ("Cortical gray matter", "CGM"),
    ("Subcortical gray matter", "SGM"),
    ("Cerebrospinal fluid", "CSF"),
]

# (full name, abbreviation); the first 24 are merged bilateral pairs, the
# CC_* subdivisions are commissural (single, midline)
_TRACTS_BILATERAL = [
    ("Corticospinal tract", "CST"),
    ("Fronto-pontine tract", "FPT"),
    ("Parieto-occipital pontine tract", "POPT"),
    ("Fronto-orbital-striatal", "ST_FO"),
    ("Occipito-striatal", "ST_OCC"),
    ("Parieto-striatal", "ST_PAR"),
    ("Postcentral-striatal", "ST_POSTC"),
    ("Precentral-striatal", "ST_PREC"),
    ("Prefrontal-striatal", "ST_PREF"),
    ("Premotor-striatal", "ST_PREM"),
    ("Anterior thalamic radiation", "ATR"),
    ("Optic radiation", "OR"),
    ("Superior thalamic radiation", "STR"),
    ("Thalamo-occipital radiation", "T_OCC"),
    ("Thalamo-parietal radiation", "T_PAR"),
    ("Thalamo-postcentral radiation", "T_POSTC"),
    ("Thalamo-precentral radiation", "T_PREC"),
    ("Thalamo-prefrontal radiation", "T_PREF"),
    ("Thalamo-premotor radiation", "T_PREM"),
    ("Frontal aslant tract", "FAT"),
    ("Inferior fronto-occipital fasciculus", "IFO"),
    ("Inferior longitudinal fascicle", "ILF"),
    ("Middle longitudinal fascicle", "MLF"),
    ("Uncinate fasciculus", "UF"),
]

_TRACTS_COMMISSURAL = [
    ("Corpus callosum rostrum", "CC_1"),
    ("Corpus callosum genu", "CC_2"),
    ("Corpus callosum rostral body", "CC_3"),
    ("Corpus callosum anterior midbody", "CC_4"),
    ("Corpus callosum posterior midbody", "CC_5"),
    ("Corpus callosum isthmus", "CC_6"),
    ("Corpus callosum splenium", "CC_7"),
]

# (full name, abbreviation, bilateral flag) in table order
_PARCELS = [
    ("Gyrus rectus", "Rect", True),
    ("Medial superior frontal gyrus", "MedSupF", True),
    ("Middle frontal gyrus", "MidF", True),
    ("Olfactory cortex", "Olf", True),
    ("Opercular part of the inferior frontal gyrus", "OpIF", True),
    ("Orbital part of the inferior frontal gyrus", "OrbIF", True),
    ("Orbital part of the medial frontal gyrus", "OrbMF", True),
    ("Orbital part of the middle frontal gyrus", "OrbMidF", True),
    ("Orbital part of the superior frontal gyrus", "OrbSF", True),
    ("Paracentral lobule", "PCL", True),
    ("Precentral gyrus", "PreC", True),
    ("Rolandic operculum", "RolOper", True),
    ("Superior frontal gyrus", "SupF", True),
    ("Supplementary motor area", "SMA", True),
    ("Triangular part of the inferior frontal gyrus", "TriIFG", True),
    ("Angular gyrus", "Ang", True),
    ("Inferior parietal lobule", "IPL", True),
    ("Postcentral gyrus", "Pstcent", True),
    ("Precuneus", "Precuneus", True),
    ("Superior parietal lobule", "SPL", True),
    ("Supramarginal gyrus", "SMG", True),
    ("Calcarine cortex", "Calc", True),
    ("Cuneus", "Cuneus", True),
    ("Fusiform gyrus", "Fusiform", True),
    ("Inferior occipital gyrus", "InfOcc", True),
    ("Lingual gyrus", "Ling", True),
    ("Middle occipital gyrus", "MidOcc", True),
    ("Superior occipital gyrus", "SupOcc", True),
    ("Temporal pole (superior)", "SupTP", True),
    ("Hippocampus", "Hipp", True),
    ("Inferior temporal gyrus", "InfTemp", True),
    ("Middle temporal gyrus", "MidTemp", True),
    ("Parahippocampal gyrus", "ParaHip", True),
    ("Superior temporal gyrus", "SupTemp", True),
    ("Temporal pole (middle)", "MidTP", True),
    ("Transverse temporal gyrus", "TransTemp", True),
    ("Anterior cingulate cortex", "AntCng", True),
    ("Middle cingulate cortex", "MidCng", True),
    ("Posterior cingulate cortex", "PostCng", True),
    ("Insula", "Ins", True),
    ("Brainstem", "BS", False),
    ("Corpus callosum", "CC", False),
    ("Internal capsule", "IC", True),
    ("Periventricular white matter", "pWM", True),
    ("Amygdala", "Amyg", True),
    ("Caudate nucleus", "Caud", True),
    ("Lentiform", "Lent", True),
    ("Thalamus", "Thal", True),
    ("Cerebellum", "Cb", True),
]


def tissue_schema() -> LabelSchema:
    labels = tuple(Label(i + 1, n, a) for i, (n, a) in enumerate(_TISSUES))
    return LabelSchema("tissue", labels, exclusive=True)


def tract_schema() -> LabelSchema:
    """31 merged tract channels; non-exclusive (tracts may overlap)."""
    pairs = _TRACTS_BILATERAL + _TRACTS_COMMISSURAL
    labels = tuple(Label(i + 1, n, a) for i, (n, a) in enumerate(pairs))
    return LabelSchema("tract", labels, exclusive=False)


def bilateral_tract_abbreviations() -> list[str]:
    return [a for _, a in _TRACTS_BILATERAL]


def commissural_tract_abbreviations() -> list[str]:
    return [a for _, a in _TRACTS_COMMISSURAL]


def parcellation_schema() -> LabelSchema:
    labels = []
    i = 1
    for name, abbr, bilateral in _PARCELS:
        if bilateral:
            labels.append(Label(i, f"Left {name.lower()}", f"{abbr}_L"))
            labels.append(Label(i + 1, f"Right {name.lower()}", f"{abbr}_R"))
            i += 2
        else:
            labels.append(Label(i, name, abbr))
            i += 1
    return LabelSchema("parcellation", tuple(labels), exclusive=True)


_BUILTIN = {
    "tissue": tissue_schema,
    "tract": tract_schema,
    "parcellation": parcellation_schema,
}


def get_schema(name: str) -> LabelSchema:
    try:
        builder = _BUILTIN[name]
    except KeyError:
        raise KeyError(f"unknown schema {name!r}; available: {sorted(_BUILTIN)}") from None
    schema = builder()
    expected = {"tissue": 4, "tract": 31, "parcellation": 96}[name]
    assert len(schema) == expected, f"{name} schema corrupted: {len(schema)} labels"
    return schema
