"""Lightweight part-of-speech tagging for noun selection.

The mask builder only needs one decision per word: noun or not.  The
bundled tagger makes that call from closed-class word lists plus a
lexicon of frequent caption verbs, adjectives, and adverbs; anything
left over is treated as a noun, which is the right default for the
open-class vocabulary of image captions.  Alternative taggers can be
registered under a config name and swapped in without touching the
masking code.
"""

from __future__ import annotations

import string

from .errors import ConfigError

# Closed-class function words: never nouns.
_FUNCTION_WORDS = {
    # determiners / articles
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "no",
    "each", "every", "either", "neither", "both", "all", "few", "several",
    "many", "much", "more", "most", "other", "another", "such", "own", "same",
    # pronouns
    "i", "me", "my", "mine", "you", "your", "yours", "he", "him", "his",
    "she", "her", "hers", "it", "its", "we", "us", "our", "ours", "they",
    "them", "their", "theirs", "who", "whom", "whose", "which", "what",
    "someone", "something", "anyone", "anything", "everyone", "everything",
    "nobody", "nothing", "one", "ones", "itself", "himself", "herself",
    "themselves", "myself", "yourself", "ourselves",
    # prepositions / particles
    "in", "on", "at", "by", "for", "with", "without", "about", "against",
    "between", "among", "into", "onto", "through", "during", "before",
    "after", "above", "below", "under", "underneath", "over", "up", "down",
    "out", "off", "near", "nearby", "beside", "besides", "behind", "beyond",
    "across", "along", "around", "inside", "outside", "toward", "towards",
    "upon", "within", "of", "from", "to", "as", "via", "per", "amid",
    "atop", "beneath", "except", "like", "unlike", "past", "since", "until",
    "till", "versus",
    # conjunctions / complementizers
    "and", "or", "but", "nor", "so", "yet", "if", "because", "although",
    "though", "while", "whereas", "unless", "whether", "than", "that",
    "when", "whenever", "where", "wherever", "why", "how",
    # auxiliaries / copulas / modals
    "am", "is", "are", "was", "were", "be", "been", "being", "do", "does",
    "did", "done", "doing", "have", "has", "had", "having", "will", "would",
    "shall", "should", "can", "could", "may", "might", "must", "ought",
    "need", "dare", "not", "n't",
    # misc function-y fillers
    "there", "here", "then", "now", "also", "too", "very", "just", "only",
    "even", "still", "again", "once", "twice", "yes", "no", "please",
}

# Frequent caption verbs (base forms plus common inflections) that would
# otherwise default to noun.
_COMMON_VERBS = {
    "go", "goes", "went", "gone", "going", "get", "gets", "got", "gotten",
    "getting", "make", "makes", "made", "making", "take", "takes", "took",
    "taken", "taking", "come", "comes", "came", "coming", "see", "sees",
    "saw", "seen", "seeing", "look", "looks", "looked", "looking", "use",
    "uses", "used", "using", "find", "finds", "found", "finding", "give",
    "gives", "gave", "given", "giving", "tell", "tells", "told", "telling",
    "ask", "asks", "asked", "asking", "seem", "seems", "seemed", "seeming",
    "feel", "feels", "felt", "feeling", "leave", "leaves", "left", "leaving",
    "put", "puts", "putting", "keep", "keeps", "kept", "keeping", "let",
    "lets", "letting", "begin", "begins", "began", "begun", "beginning",
    "show", "shows", "showed", "shown", "showing", "hear", "hears", "heard",
    "hearing", "run", "runs", "ran", "running", "move", "moves", "moved",
    "moving", "live", "lives", "lived", "living", "believe", "believes",
    "believed", "bring", "brings", "brought", "bringing", "happen",
    "happens", "happened", "happening", "write", "writes", "wrote",
    "written", "writing", "sit", "sits", "sat", "sitting", "stand",
    "stands", "stood", "standing", "lose", "loses", "lost", "losing",
    "pay", "pays", "paid", "paying", "meet", "meets", "met", "meeting",
    "include", "includes", "included", "including", "continue", "continues",
    "continued", "continuing", "set", "sets", "setting", "learn", "learns",
    "learned", "learning", "change", "changes", "changed", "changing",
    "lead", "leads", "led", "leading", "understand", "understands",
    "understood", "watch", "watches", "watched", "watching", "follow",
    "follows", "followed", "following", "stop", "stops", "stopped",
    "stopping", "create", "creates", "created", "creating", "speak",
    "speaks", "spoke", "spoken", "speaking", "read", "reads", "reading",
    "spend", "spends", "spent", "spending", "grow", "grows", "grew",
    "grown", "growing", "open", "opens", "opened", "opening", "walk",
    "walks", "walked", "walking", "win", "wins", "won", "winning", "offer",
    "offers", "offered", "offering", "remember", "remembers", "remembered",
    "consider", "considers", "considered", "appear", "appears", "appeared",
    "appearing", "buy", "buys", "bought", "buying", "wait", "waits",
    "waited", "waiting", "serve", "serves", "served", "serving", "die",
    "dies", "died", "dying", "send", "sends", "sent", "sending", "expect",
    "expects", "expected", "build", "builds", "built", "stay", "stays",
    "stayed", "staying", "fall", "falls", "fell", "fallen", "falling",
    "cut", "cuts", "cutting", "reach", "reaches", "reached", "reaching",
    "kill", "kills", "killed", "remain", "remains", "remained", "wear",
    "wears", "wore", "worn", "wearing", "hold", "holds", "held", "holding",
    "carry", "carries", "carried", "carrying", "eat", "eats", "ate",
    "eaten", "eating", "drink", "drinks", "drank", "drinking", "play",
    "plays", "played", "playing", "jump", "jumps", "jumped", "jumping",
    "fly", "flies", "flew", "flown", "flying", "swim", "swims", "swam",
    "swimming", "ride", "rides", "rode", "ridden", "riding", "climb",
    "climbs", "climbed", "climbing", "sleep", "sleeps", "slept",
    "sleeping", "smile", "smiles", "smiled", "smiling", "laugh", "laughs",
    "laughed", "laughing", "pull", "pulls", "pulled", "pulling", "push",
    "pushes", "pushed", "pushing", "throw", "throws", "threw", "thrown",
    "throwing", "catch", "catches", "caught", "catching", "hang", "hangs",
    "hung", "hanging", "lie", "lying", "lay", "lain", "rest", "rests",
    "rested", "resting", "pose", "poses", "posed", "posing", "perform",
    "performs", "performed", "performing", "relax", "relaxes", "relaxed",
    "relaxing", "enjoy", "enjoys", "enjoyed", "enjoying", "celebrate",
    "celebrates", "celebrated", "celebrating", "surround", "surrounds",
    "surrounded", "surrounding", "attach", "attached", "cover", "covers",
    "covered", "covering", "fill", "fills", "filled", "filling",
}

# Frequent caption adjectives (colors, sizes, states) and adverbs.
_COMMON_MODIFIERS = {
    # colors
    "red", "orange", "yellow", "green", "blue", "purple", "violet", "pink",
    "brown", "black", "white", "gray", "grey", "golden", "silver", "beige",
    "tan", "teal", "cyan", "magenta", "maroon", "navy", "olive", "crimson",
    "turquoise", "ivory", "amber", "scarlet",
    # size / shape / age
    "big", "small", "large", "little", "tiny", "huge", "giant", "tall",
    "short", "long", "wide", "narrow", "thick", "thin", "round", "flat",
    "deep", "shallow", "high", "low", "old", "young", "new", "ancient",
    "modern", "vintage",
    # quality / state
    "good", "bad", "great", "nice", "beautiful", "pretty", "ugly", "clean",
    "dirty", "bright", "dark", "light", "colorful", "pale", "shiny",
    "wooden", "metal", "plastic", "glass", "stone", "furry", "fluffy",
    "happy", "sad", "angry", "calm", "quiet", "loud", "busy", "empty",
    "full", "open", "closed", "hot", "cold", "warm", "cool", "wet", "dry",
    "fresh", "soft", "hard", "heavy", "fast", "slow", "early", "late",
    "first", "second", "third", "last", "next", "previous", "single",
    "double", "striped", "spotted", "checkered", "plaid", "floral",
    "sleeveless", "casual", "formal", "fancy", "plain", "cute", "cozy",
    "snowy", "rainy", "sunny", "cloudy", "foggy", "rocky", "sandy",
    "grassy", "leafy", "crowded", "distant", "nearby", "several",
    # adverbs that escape the -ly rule
    "well", "often", "always", "never", "sometimes", "together", "apart",
    "away", "back", "forward", "ahead", "almost", "quite", "rather",
    "really", "perhaps", "maybe", "alone", "outdoors", "indoors",
}

# Words ending in -ly that are nonetheless nouns.
_LY_NOUNS = {"family", "butterfly", "jelly", "lily", "belly", "assembly",
             "ally", "rally", "bully", "tally", "dragonfly", "firefly",
             "monopoly", "anomaly", "italy"}

_STRIP = string.punctuation + string.whitespace


class LexiconTagger:
    """Noun-or-not tagging from word lists; open-class words default to noun."""

    name = "builtin"

    def tag(self, words: list[str]) -> list[str]:
        return [self._tag_word(w) for w in words]

    @staticmethod
    def _tag_word(word: str) -> str:
        w = word.strip(_STRIP).lower()
        if not w or not any(c.isalpha() for c in w):
            return "OTHER"
        if w in _FUNCTION_WORDS or w in _COMMON_VERBS or w in _COMMON_MODIFIERS:
            return "OTHER"
        if w.endswith("ly") and w not in _LY_NOUNS:
            return "OTHER"
        return "NOUN"


_TAGGERS = {"builtin": LexiconTagger}


def get_tagger(name: str = "builtin"):
    if name not in _TAGGERS:
        raise ConfigError(f"mask.pos_tagger must be one of {sorted(_TAGGERS)}; got '{name}'")
    return _TAGGERS[name]()
