"""Paged KvCache bookkeeping for one GPU.

Every request owns its own list of page ids (batch dimension outermost), so
any request can be released at any step without touching the others. No KV
data is stored; only page ownership and sequence lengths.
"""
from dataclasses import dataclass


@dataclass(frozen=True)
class KvPageConfig:
    page_size: int = 16
    layers: int = 32
    kv_heads: int = 32
    head_dim: int = 128
    elem_bytes: int = 2
    total_pages: int = 1024

    def __post_init__(self):
        for name in ("page_size", "layers", "kv_heads", "head_dim", "elem_bytes", "total_pages"):
            if getattr(self, name) < 1:
                raise ValueError(f"kvcache.{name} must be positive")

    @property
    def bytes_per_page(self):
        return self.layers * 2 * self.kv_heads * self.page_size * self.head_dim * self.elem_bytes

    def pages_for(self, tokens):
        return -(-tokens // self.page_size)


class PagedKvAllocator:
    """Page-granular KvCache allocator.

    ``reserve`` and ``extend`` return False when the pool cannot satisfy the
    request; the pool is left untouched in that case. Unknown or duplicate
    request ids raise ``KeyError``.
    """

    def __init__(self, config):
        self.config = config
        self._page = config.page_size
        self._free = list(range(config.total_pages - 1, -1, -1))
        self._pages = {}
        self._len = {}

    @property
    def total_pages(self):
        return self.config.total_pages

    @property
    def free_pages(self):
        return len(self._free)

    def __contains__(self, rid):
        return rid in self._len

    def __len__(self):
        return len(self._len)

    def requests(self):
        return list(self._len)

    def seq_len(self, rid):
        return self._len[rid]

    def pages_held(self, rid):
        return len(self._pages[rid])

    def page_ids(self, rid):
        return tuple(self._pages[rid])

    def _take(self, k):
        taken = self._free[-k:] if k else []
        del self._free[len(self._free) - k:]
        return taken

    def reserve(self, rid, initial_len):
        if rid in self._len:
            raise KeyError(f"request {rid!r} already holds a reservation")
        if initial_len < 0:
            raise ValueError("negative length")
        need = -(-initial_len // self._page)
        if need > len(self._free):
            return False
        self._pages[rid] = self._take(need)
        self._len[rid] = initial_len
        return True

    def extend(self, rid, new_tokens=1):
        cur = self._len[rid]
        pages = self._pages[rid]
        need = -(-(cur + new_tokens) // self._page) - len(pages)
        if need > len(self._free):
            return False
        if need > 0:
            pages.extend(self._take(need))
        self._len[rid] = cur + new_tokens
        return True

    def release(self, rid):
        pages = self._pages.pop(rid)
        del self._len[rid]
        self._free.extend(reversed(pages))
        return len(pages)

    def can_admit(self, prompt_len, headroom_pages=0):
        return -(-prompt_len // self._page) + headroom_pages <= len(self._free)
