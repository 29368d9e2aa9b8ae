#pragma once

// Fixed word list behind the shipped tokenizer vocabulary. The tokenizer
// derives its merge table from this list at construction; the list is part of
// the versioned vocabulary and must not be reordered or edited in place.
// Append-only changes require bumping the vocab version in tokenizer.hpp.

#include <array>
#include <string_view>

namespace moescope::vocab {

inline constexpr std::array<std::string_view, 269> kWordList = {
    // Frequent English words, space-prefixed (mid-sentence form).
    " the", " of", " and", " to", " a", " in", " is", " was", " that", " for",
    " it", " with", " as", " his", " on", " be", " at", " by", " had", " not",
    " are", " but", " from", " or", " have", " an", " they", " which", " one",
    " you", " were", " her", " all", " she", " there", " would", " their",
    " we", " him", " been", " has", " when", " who", " will", " more", " no",
    " if", " out", " so", " said", " what", " up", " its", " about", " into",
    " than", " them", " can", " only", " other", " new", " some", " could",
    " time", " these", " two", " may", " then", " do", " first", " any",
    " my", " now", " such", " like", " our", " over", " man", " me", " even",
    " most", " made", " after", " also", " did", " many", " before", " must",
    " through", " years", " where", " much", " your", " way", " well",
    " down", " should", " because", " each", " just", " those", " people",
    " how", " too", " little", " state", " good", " very", " make", " world",
    " still", " own", " see", " men", " work", " long", " get", " here",
    " between", " both", " life", " being", " under", " never", " day",
    " same", " another", " know", " while", " last", " might", " us",
    " great", " old", " year", " off", " come", " since", " against", " go",
    " came", " right", " used", " take", " three", " himself", " few",
    " house", " use", " during", " without", " again", " place", " around",
    " however", " home", " small", " found", " thought", " went", " say",
    " part", " once", " high", " general", " upon", " school", " every",
    " does", " got", " united", " left", " number", " course", " war",
    " until", " always", " away", " something", " fact", " water", " though",
    " less", " public", " put", " think", " almost", " hand", " enough",
    " far", " took", " head", " yet", " government", " system", " better",
    " set", " told", " nothing", " night", " end", " why", " called",
    " didn", " eyes", " find", " going", " look",
    // Sentence-initial forms.
    "The", "This", "That", "It", "In", "A", "We", "He", "She", "They",
    // Common stems and suffix fragments.
    "the", "and", "ing", "tion", "er", "ed", "ly", "es", "al", "ent",
    // Code-flavoured tokens.
    " def", " class", " import", " return", " lambda", " async", " await",
    " True", " False", " None", " self", " print", " raise", " except",
    // LaTeX-flavoured tokens.
    "frac", "begin", "end", "title", "author", "cite", "abstract", "mathbf",
    // Names and rare words kept whole for the attribution fixtures.
    " fjord", " qubit", " sphinx", " obelisk", " zeppelin", " glacier",
    " lantern", " meadow", " omega", " sigma", " delta", " kappa",
    " room", " Tokyo", " Japan", " Paris", " France", " London", " Berlin",
};

}  // namespace moescope::vocab
