"""DEX parsing, assembly, stubbing, and class-reference extraction."""

from .builder import (  # noqa: F401
    ClassSpec,
    DexBuilder,
    FieldRef,
    FieldSpec,
    MethodRef,
    MethodSpec,
    default_body,
)
from .format import (  # noqa: F401
    DexFile,
    descriptor_to_dotted,
    dotted_to_descriptor,
    iter_instructions,
    parse_dex,
    repair_header,
)
from .refs import (  # noqa: F401
    DEFAULT_EXCLUDED_PREFIXES,
    ClassGraph,
    Edge,
    extract_class_refs,
    is_excluded,
)
from .stub import ALL, StubOutcome, stub_method_bodies, stub_sequence  # noqa: F401
